#include "fedsim/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

#include "fedsim/errors.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

namespace {

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

// grayscale structure of one class at (x, y), in roughly [0, 1]
double structure_at(const ClassPrototype& proto, double xn, double yn) {
    const double wave = std::sin(2.0 * 3.14159265358979323846 * proto.freq *
                                     (std::cos(proto.angle) * xn + std::sin(proto.angle) * yn) +
                                 proto.phase);
    double v = 0.5 + proto.wave_amp * wave;
    for (const auto& blob : proto.blobs) {
        const double dx = xn - blob[0];
        const double dy = yn - blob[1];
        v += proto.blob_amp *
             std::exp(-(dx * dx + dy * dy) / (2.0 * proto.blob_sigma * proto.blob_sigma));
    }
    return v;
}

} // namespace

CenterDataset generate_center_dataset(const CenterSpec& spec, std::size_t height,
                                      std::size_t width, std::uint64_t seed) {
    if (spec.class_prototypes.empty()) {
        throw ContractError("generate_center_dataset: no class prototypes");
    }
    if (spec.n_per_class == 0) {
        throw ContractError("generate_center_dataset: n_per_class must be >= 1");
    }
    const std::size_t n_classes = spec.class_prototypes.size();
    Rng rng(derive_seed(seed, {0xDA7A, static_cast<std::uint64_t>(spec.center_id)}));

    CenterDataset out;
    out.center_id = spec.center_id;
    out.n_classes = n_classes;
    out.samples.reserve(n_classes * spec.n_per_class);

    // per-class structure is fixed; cache it once
    std::vector<Tensor> protos;
    protos.reserve(n_classes);
    for (const auto& proto : spec.class_prototypes) {
        Tensor s({height, width});
        for (std::size_t y = 0; y < height; ++y) {
            for (std::size_t x = 0; x < width; ++x) {
                s[y * width + x] = structure_at(proto, (static_cast<double>(x) + 0.5) / width,
                                                (static_cast<double>(y) + 0.5) / height);
            }
        }
        protos.push_back(std::move(s));
    }

    const auto& A = spec.stain.matrix;
    const auto& b = spec.stain.offset;
    for (std::size_t k = 0; k < n_classes; ++k) {
        for (std::size_t i = 0; i < spec.n_per_class; ++i) {
            Tensor img({3, height, width});
            for (std::size_t p = 0; p < height * width; ++p) {
                double raw[3];
                for (int c = 0; c < 3; ++c) {
                    raw[c] = protos[k][p] + spec.noise_sigma * rng.normal();
                }
                for (int c = 0; c < 3; ++c) {
                    const double v =
                        A[3 * c + 0] * raw[0] + A[3 * c + 1] * raw[1] + A[3 * c + 2] * raw[2] + b[c];
                    img[static_cast<std::size_t>(c) * height * width + p] = clamp01(v);
                }
            }
            out.samples.push_back({std::move(img), static_cast<int>(k), spec.center_id});
        }
    }
    return out;
}

std::vector<PseudoSample> generate_pseudo_images(const CenterDataset& dataset, std::size_t n,
                                                 std::uint64_t seed) {
    if (n == 0) throw ContractError("generate_pseudo_images: n must be >= 1");
    if (dataset.samples.empty()) throw ContractError("generate_pseudo_images: empty dataset");

    const std::size_t pixels = dataset.samples.front().image.size();
    std::vector<double> mean(pixels, 0.0), var(pixels, 0.0);
    for (const auto& s : dataset.samples) {
        for (std::size_t p = 0; p < pixels; ++p) mean[p] += s.image[p];
    }
    const double inv_n = 1.0 / static_cast<double>(dataset.samples.size());
    for (auto& m : mean) m *= inv_n;
    for (const auto& s : dataset.samples) {
        for (std::size_t p = 0; p < pixels; ++p) {
            const double d = s.image[p] - mean[p];
            var[p] += d * d;
        }
    }
    std::vector<double> sdev(pixels);
    for (std::size_t p = 0; p < pixels; ++p) {
        // population variance, floored so degenerate pixels still move
        sdev[p] = std::max(std::sqrt(var[p] * inv_n), 1e-3);
    }

    std::set<std::string> real_bytes;
    for (const auto& s : dataset.samples) {
        real_bytes.emplace(reinterpret_cast<const char*>(s.image.data()),
                           s.image.size() * sizeof(double));
    }

    Rng rng(derive_seed(seed, {0x95E0D0, static_cast<std::uint64_t>(dataset.center_id)}));
    const auto& shape = dataset.samples.front().image.shape();

    std::vector<PseudoSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Tensor img;
        bool fresh = false;
        for (int attempt = 0; attempt < 1000 && !fresh; ++attempt) {
            std::vector<double> data(pixels);
            for (std::size_t p = 0; p < pixels; ++p) {
                data[p] = clamp01(mean[p] + sdev[p] * rng.normal());
            }
            img = Tensor(shape, std::move(data));
            fresh = real_bytes.count(std::string(reinterpret_cast<const char*>(img.data()),
                                                 pixels * sizeof(double))) == 0;
        }
        if (!fresh) {
            throw NumericError("generate_pseudo_images: could not escape a bitwise collision");
        }
        out.push_back({std::move(img), dataset.center_id});
    }
    return out;
}

Tensor corrupt(const Tensor& image, std::size_t grid, std::size_t k_swaps, std::uint64_t seed) {
    if (image.rank() != 3) {
        throw ContractError("corrupt: expected a (C, H, W) image, got " + image.shape_str());
    }
    const std::size_t channels = image.dim(0), height = image.dim(1), width = image.dim(2);
    if (grid == 0 || height % grid != 0 || width % grid != 0) {
        throw ContractError("corrupt: image " + image.shape_str() + " not divisible into " +
                            std::to_string(grid) + "x" + std::to_string(grid) + " patches");
    }
    if (2 * k_swaps > grid * grid) {
        throw ContractError("corrupt: " + std::to_string(k_swaps) +
                            " disjoint swaps need more patches than a " + std::to_string(grid) +
                            "x" + std::to_string(grid) + " grid has");
    }

    Tensor out = image;
    if (k_swaps == 0) return out;

    Rng rng(seed);
    std::vector<std::size_t> perm(grid * grid);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);

    const std::size_t ph = height / grid, pw = width / grid;
    auto swap_patches = [&](std::size_t pa, std::size_t pb) {
        const std::size_t ay = (pa / grid) * ph, ax = (pa % grid) * pw;
        const std::size_t by = (pb / grid) * ph, bx = (pb % grid) * pw;
        for (std::size_t c = 0; c < channels; ++c) {
            double* plane = out.data() + c * height * width;
            for (std::size_t y = 0; y < ph; ++y) {
                for (std::size_t x = 0; x < pw; ++x) {
                    std::swap(plane[(ay + y) * width + ax + x], plane[(by + y) * width + bx + x]);
                }
            }
        }
    };
    for (std::size_t i = 0; i < k_swaps; ++i) swap_patches(perm[2 * i], perm[2 * i + 1]);
    return out;
}

namespace {

Tensor rot90(const Tensor& img) {
    const std::size_t channels = img.dim(0), n = img.dim(1);
    Tensor out(img.shape());
    for (std::size_t c = 0; c < channels; ++c) {
        const double* in = img.data() + c * n * n;
        double* op = out.data() + c * n * n;
        for (std::size_t y = 0; y < n; ++y) {
            for (std::size_t x = 0; x < n; ++x) op[y * n + x] = in[(n - 1 - x) * n + y];
        }
    }
    return out;
}

Tensor hflip(const Tensor& img) {
    const std::size_t channels = img.dim(0), n = img.dim(1);
    Tensor out(img.shape());
    for (std::size_t c = 0; c < channels; ++c) {
        const double* in = img.data() + c * n * n;
        double* op = out.data() + c * n * n;
        for (std::size_t y = 0; y < n; ++y) {
            for (std::size_t x = 0; x < n; ++x) op[y * n + x] = in[y * n + (n - 1 - x)];
        }
    }
    return out;
}

} // namespace

std::vector<Tensor> augment(const Tensor& image) {
    if (image.rank() != 3) {
        throw ContractError("augment: expected a (C, H, W) image, got " + image.shape_str());
    }
    if (image.dim(1) != image.dim(2)) {
        throw ContractError("augment: image must be square, got " + image.shape_str());
    }
    std::vector<Tensor> out;
    out.reserve(8);
    out.push_back(image);
    for (int i = 0; i < 3; ++i) out.push_back(rot90(out.back()));
    for (int i = 0; i < 4; ++i) out.push_back(hflip(out[static_cast<std::size_t>(i)]));
    return out;
}

std::vector<FoldIndices> kfold_split(const CenterDataset& dataset, std::size_t k,
                                     std::uint64_t seed) {
    if (k < 2) throw ContractError("kfold_split: k must be >= 2");

    std::vector<std::vector<std::size_t>> by_class(dataset.n_classes);
    for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
        const int label = dataset.samples[i].label;
        if (label < 0 || static_cast<std::size_t>(label) >= dataset.n_classes) {
            throw ContractError("kfold_split: label " + std::to_string(label) + " out of range");
        }
        by_class[static_cast<std::size_t>(label)].push_back(i);
    }
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        if (by_class[c].size() < k) {
            throw ContractError("kfold_split: class " + std::to_string(c) + " has " +
                                std::to_string(by_class[c].size()) + " samples, fewer than k=" +
                                std::to_string(k));
        }
    }

    Rng rng(derive_seed(seed, {0xF01D, static_cast<std::uint64_t>(dataset.center_id)}));
    std::vector<std::vector<std::size_t>> test_sets(k);
    for (auto& cls : by_class) {
        rng.shuffle(cls);
        for (std::size_t i = 0; i < cls.size(); ++i) test_sets[i % k].push_back(cls[i]);
    }

    std::vector<FoldIndices> out(k);
    for (std::size_t f = 0; f < k; ++f) {
        std::vector<std::size_t>& test = test_sets[f];
        std::sort(test.begin(), test.end());
        std::vector<char> in_test(dataset.samples.size(), 0);
        for (std::size_t i : test) in_test[i] = 1;
        std::vector<std::size_t> train;
        train.reserve(dataset.samples.size() - test.size());
        for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
            if (!in_test[i]) train.push_back(i);
        }
        out[f] = {std::move(train), std::move(test)};
    }
    return out;
}

std::vector<Sample> augment_samples(const std::vector<Sample>& samples) {
    std::vector<Sample> out;
    out.reserve(samples.size() * 8);
    for (const auto& s : samples) {
        for (auto& variant : augment(s.image)) {
            out.push_back({std::move(variant), s.label, s.center_id});
        }
    }
    return out;
}

Tensor flatten_images(const std::vector<Sample>& samples, const std::vector<std::size_t>& idx) {
    if (idx.empty()) throw ContractError("flatten_images: empty selection");
    const std::size_t pixels = samples[idx[0]].image.size();
    Tensor out({idx.size(), pixels});
    for (std::size_t r = 0; r < idx.size(); ++r) {
        const Tensor& img = samples[idx[r]].image;
        std::memcpy(out.data() + r * pixels, img.data(), pixels * sizeof(double));
    }
    return out;
}

std::vector<int> gather_labels(const std::vector<Sample>& samples,
                               const std::vector<std::size_t>& idx) {
    std::vector<int> out(idx.size());
    for (std::size_t r = 0; r < idx.size(); ++r) out[r] = samples[idx[r]].label;
    return out;
}

namespace {

constexpr char kMagic[8] = {'F', 'S', 'D', 'A', 'T', 'S', 'E', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is, const std::string& what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError("archive: truncated " + what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

void put_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64(std::istream& is, const std::string& what) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw DataError("archive: truncated " + what);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

struct Record {
    int center_id;
    int label;
    const Tensor* image;
};

void save_archive(const std::string& path, std::size_t channels, std::size_t height,
                  std::size_t width, std::size_t n_classes, const std::vector<Record>& records) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("archive: cannot open '" + path + "' for writing");
    os.write(kMagic, sizeof(kMagic));
    put_u32(os, kVersion);
    put_u32(os, static_cast<std::uint32_t>(records.size()));
    put_u32(os, static_cast<std::uint32_t>(channels));
    put_u32(os, static_cast<std::uint32_t>(height));
    put_u32(os, static_cast<std::uint32_t>(width));
    put_u32(os, static_cast<std::uint32_t>(n_classes));
    for (const auto& r : records) {
        put_u32(os, static_cast<std::uint32_t>(r.center_id));
        put_u32(os, static_cast<std::uint32_t>(r.label));
        for (std::size_t p = 0; p < r.image->size(); ++p) put_f64(os, (*r.image)[p]);
    }
    if (!os) throw DataError("archive: write failed on '" + path + "'");
}

struct LoadedArchive {
    std::size_t channels, height, width, n_classes;
    std::vector<Sample> samples;  // label -1 for pseudo
};

LoadedArchive load_archive(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("archive: cannot open '" + path + "'");
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
        throw DataError("archive: bad magic in '" + path + "'");
    }
    const std::uint32_t version = get_u32(is, "version");
    if (version != kVersion) throw DataError("archive: unsupported version");
    const std::uint32_t n_samples = get_u32(is, "sample count");
    LoadedArchive out;
    out.channels = get_u32(is, "channels");
    out.height = get_u32(is, "height");
    out.width = get_u32(is, "width");
    out.n_classes = get_u32(is, "class count");
    const std::size_t pixels = out.channels * out.height * out.width;
    out.samples.reserve(n_samples);
    for (std::uint32_t i = 0; i < n_samples; ++i) {
        Sample s;
        s.center_id = static_cast<int>(get_u32(is, "center id"));
        s.label = static_cast<int>(get_u32(is, "label"));
        std::vector<double> data(pixels);
        for (auto& v : data) v = get_f64(is, "pixel");
        s.image = Tensor({out.channels, out.height, out.width}, std::move(data));
        out.samples.push_back(std::move(s));
    }
    return out;
}

} // namespace

void save_dataset(const CenterDataset& dataset, const std::string& path) {
    if (dataset.samples.empty()) throw DataError("archive: refusing to write empty dataset");
    std::vector<Record> records;
    records.reserve(dataset.samples.size());
    for (const auto& s : dataset.samples) records.push_back({s.center_id, s.label, &s.image});
    const auto& shape = dataset.samples.front().image.shape();
    save_archive(path, shape[0], shape[1], shape[2], dataset.n_classes, records);
}

CenterDataset load_dataset(const std::string& path) {
    LoadedArchive a = load_archive(path);
    CenterDataset out;
    out.n_classes = a.n_classes;
    if (a.samples.empty()) throw DataError("archive: '" + path + "' holds no samples");
    out.center_id = a.samples.front().center_id;
    for (auto& s : a.samples) {
        if (s.label < 0 || static_cast<std::size_t>(s.label) >= a.n_classes) {
            throw DataError("archive: '" + path + "' holds a label outside [0, " +
                            std::to_string(a.n_classes) + ")");
        }
    }
    out.samples = std::move(a.samples);
    return out;
}

void save_pseudo(const std::vector<PseudoSample>& pseudo, std::size_t n_classes,
                 const std::string& path) {
    if (pseudo.empty()) throw DataError("archive: refusing to write empty pseudo set");
    std::vector<Record> records;
    records.reserve(pseudo.size());
    for (const auto& p : pseudo) records.push_back({p.center_id, -1, &p.image});
    const auto& shape = pseudo.front().image.shape();
    save_archive(path, shape[0], shape[1], shape[2], n_classes, records);
}

std::vector<PseudoSample> load_pseudo(const std::string& path) {
    LoadedArchive a = load_archive(path);
    std::vector<PseudoSample> out;
    out.reserve(a.samples.size());
    for (auto& s : a.samples) {
        if (s.label != -1) {
            throw DataError("archive: '" + path + "' holds labeled samples, expected pseudo data");
        }
        out.push_back({std::move(s.image), s.center_id});
    }
    return out;
}

std::vector<ClassPrototype> default_class_prototypes(std::size_t n_classes) {
    // nearby frequencies and low wave amplitude keep the classes confusable
    // under the default noise level
    const std::vector<ClassPrototype> base = {
        {1.2, 0.35, 0.0, 0.12, {}, 0.0, 0.12},
        {1.7, 0.90, 0.7, 0.12, {{0.30, 0.70}}, 0.22, 0.10},
        {2.3, 1.45, 1.9, 0.12, {{0.70, 0.25}, {0.25, 0.20}}, 0.20, 0.09},
        {3.0, 0.60, 3.1, 0.12, {{0.55, 0.55}}, -0.26, 0.13},
    };
    std::vector<ClassPrototype> out;
    for (std::size_t k = 0; k < n_classes; ++k) {
        ClassPrototype p = base[k % base.size()];
        p.phase += 0.61 * static_cast<double>(k / base.size());  // keep extra classes distinct
        out.push_back(p);
    }
    return out;
}

std::vector<CenterSpec> default_center_specs(std::size_t n_centers, std::size_t n_classes,
                                             const std::vector<std::size_t>& n_per_class) {
    const std::vector<StainTransform> stains = {
        {{0.90, 0.10, 0.00, 0.05, 0.75, 0.10, 0.05, 0.10, 0.70}, {0.10, 0.00, 0.06}},
        {{0.55, 0.25, 0.10, 0.15, 0.65, 0.15, 0.05, 0.25, 0.65}, {0.00, 0.06, 0.22}},
        {{0.70, 0.15, 0.05, 0.10, 0.80, 0.05, 0.20, 0.05, 0.45}, {0.16, 0.12, 0.02}},
    };
    if (n_per_class.size() != n_centers) {
        throw ContractError("default_center_specs: need one size per center");
    }
    const auto protos = default_class_prototypes(n_classes);
    std::vector<CenterSpec> out;
    for (std::size_t i = 0; i < n_centers; ++i) {
        CenterSpec spec;
        spec.center_id = static_cast<int>(i);
        spec.n_per_class = n_per_class[i];
        spec.class_prototypes = protos;
        spec.stain = stains[i % stains.size()];
        if (i >= stains.size()) {
            // nudge repeated stains apart so centers stay distinguishable
            spec.stain.offset[i % 3] += 0.06 * static_cast<double>(i / stains.size());
        }
        spec.noise_sigma = 0.20;
        out.push_back(std::move(spec));
    }
    return out;
}

} // namespace fedsim
