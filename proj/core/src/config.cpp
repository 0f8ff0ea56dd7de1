#include "fedsim/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "fedsim/errors.hpp"

namespace fedsim {

using nlohmann::json;

ExperimentConfig ExperimentConfig::defaults() {
    ExperimentConfig cfg;
    cfg.class_prototypes = default_class_prototypes(cfg.model.n_classes);
    for (const CenterSpec& spec :
         default_center_specs(cfg.model.n_centers, cfg.model.n_classes, {24, 12, 32})) {
        cfg.centers.push_back({spec.center_id, spec.n_per_class, spec.noise_sigma, spec.stain});
    }
    return cfg;
}

void ExperimentConfig::validate() const {
    if (schema_version != 1) {
        throw ConfigError("schema_version: expected 1, got " + std::to_string(schema_version));
    }
    model.validate();
    ssl.validate();
    fl.validate();
    if (k_folds < 2) throw ConfigError("eval.k_folds must be >= 2");
    if (pseudo_n == 0) throw ConfigError("pseudo_n must be >= 1");
    if (class_prototypes.size() != model.n_classes) {
        throw ConfigError("class_prototypes: expected " + std::to_string(model.n_classes) +
                          " entries (one per class), got " +
                          std::to_string(class_prototypes.size()));
    }
    if (centers.size() != model.n_centers) {
        throw ConfigError("centers: expected " + std::to_string(model.n_centers) +
                          " entries (model.n_centers), got " + std::to_string(centers.size()));
    }
    for (const auto& proto : class_prototypes) {
        if (proto.blob_sigma <= 0.0) throw ConfigError("class_prototypes[].blob_sigma must be > 0");
    }
    for (std::size_t i = 0; i < centers.size(); ++i) {
        const auto& c = centers[i];
        if (c.n_per_class == 0) {
            throw ConfigError("centers[" + std::to_string(i) + "].n_per_class must be >= 1");
        }
        if (c.noise_sigma < 0.0) {
            throw ConfigError("centers[" + std::to_string(i) + "].noise_sigma must be >= 0");
        }
        for (std::size_t j = 0; j < i; ++j) {
            if (centers[j].center_id == c.center_id) {
                throw ConfigError("centers: duplicate center_id " + std::to_string(c.center_id));
            }
            if (centers[j].stain.matrix == c.stain.matrix &&
                centers[j].stain.offset == c.stain.offset) {
                throw ConfigError("centers[" + std::to_string(i) +
                                  "].stain duplicates centers[" + std::to_string(j) +
                                  "]; distinct centers need distinct stain transforms");
            }
        }
    }
    if (model.height % ssl.corrupt_grid != 0 || model.width % ssl.corrupt_grid != 0) {
        throw ConfigError("ssl.corrupt_grid must divide the image height and width");
    }
}

CenterSpec ExperimentConfig::center_spec(std::size_t index) const {
    if (index >= centers.size()) {
        throw ConfigError("center index " + std::to_string(index) + " out of range");
    }
    const CenterConfig& c = centers[index];
    CenterSpec spec;
    spec.center_id = c.center_id;
    spec.n_per_class = c.n_per_class;
    spec.class_prototypes = class_prototypes;
    spec.stain = c.stain;
    spec.noise_sigma = c.noise_sigma;
    return spec;
}

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& context) {
    if (!j.is_object()) throw ConfigError(context + ": expected an object");
    for (const auto& [key, value] : j.items()) {
        if (allowed.count(key) == 0) {
            throw ConfigError(context + ": unknown key '" + key + "'");
        }
    }
}

template <class T>
T fetch(const json& j, const std::string& key, const std::string& context) {
    if (!j.contains(key)) throw ConfigError(context + ": missing key '" + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(context + "." + key + ": wrong type");
    }
}

template <class T>
T fetch_or(const json& j, const std::string& key, const std::string& context, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(context + "." + key + ": wrong type");
    }
}

} // namespace

ExperimentConfig config_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }

    check_keys(j, {"schema_version", "master_seed", "model", "class_prototypes", "centers",
                   "pseudo_n", "ssl", "fl", "eval", "paths"},
               "config");

    ExperimentConfig cfg;
    cfg.schema_version = fetch<int>(j, "schema_version", "config");
    cfg.master_seed = fetch<std::uint64_t>(j, "master_seed", "config");

    auto section = [&j](const char* name) -> const json& {
        if (!j.contains(name)) {
            throw ConfigError(std::string("config: missing key '") + name + "'");
        }
        return j.at(name);
    };

    const json& jm = section("model");
    check_keys(jm, {"channels", "height", "width", "encoder_widths", "repr_dim", "proj_dim",
                    "n_classes", "n_centers"},
               "model");
    cfg.model.channels = fetch<std::size_t>(jm, "channels", "model");
    cfg.model.height = fetch<std::size_t>(jm, "height", "model");
    cfg.model.width = fetch<std::size_t>(jm, "width", "model");
    cfg.model.encoder_widths = fetch<std::vector<std::size_t>>(jm, "encoder_widths", "model");
    cfg.model.repr_dim = fetch<std::size_t>(jm, "repr_dim", "model");
    cfg.model.proj_dim = fetch<std::size_t>(jm, "proj_dim", "model");
    cfg.model.n_classes = fetch<std::size_t>(jm, "n_classes", "model");
    cfg.model.n_centers = fetch<std::size_t>(jm, "n_centers", "model");

    cfg.class_prototypes.clear();
    for (const json& jp : fetch<json>(j, "class_prototypes", "config")) {
        check_keys(jp, {"freq", "angle", "phase", "wave_amp", "blobs", "blob_amp", "blob_sigma"},
                   "class_prototypes[]");
        ClassPrototype p;
        p.freq = fetch<double>(jp, "freq", "class_prototypes[]");
        p.angle = fetch<double>(jp, "angle", "class_prototypes[]");
        p.phase = fetch<double>(jp, "phase", "class_prototypes[]");
        p.wave_amp = fetch<double>(jp, "wave_amp", "class_prototypes[]");
        for (const json& jb : fetch_or<json>(jp, "blobs", "class_prototypes[]", json::array())) {
            auto xy = jb.get<std::vector<double>>();
            if (xy.size() != 2) throw ConfigError("class_prototypes[].blobs: expected [x, y] pairs");
            p.blobs.push_back({xy[0], xy[1]});
        }
        p.blob_amp = fetch<double>(jp, "blob_amp", "class_prototypes[]");
        p.blob_sigma = fetch<double>(jp, "blob_sigma", "class_prototypes[]");
        cfg.class_prototypes.push_back(std::move(p));
    }

    cfg.centers.clear();
    for (const json& jc : fetch<json>(j, "centers", "config")) {
        check_keys(jc, {"center_id", "n_per_class", "noise_sigma", "stain_matrix", "stain_offset"},
                   "centers[]");
        CenterConfig c;
        c.center_id = fetch<int>(jc, "center_id", "centers[]");
        c.n_per_class = fetch<std::size_t>(jc, "n_per_class", "centers[]");
        c.noise_sigma = fetch<double>(jc, "noise_sigma", "centers[]");
        const auto mat = fetch<std::vector<double>>(jc, "stain_matrix", "centers[]");
        const auto off = fetch<std::vector<double>>(jc, "stain_offset", "centers[]");
        if (mat.size() != 9) throw ConfigError("centers[].stain_matrix: expected 9 values");
        if (off.size() != 3) throw ConfigError("centers[].stain_offset: expected 3 values");
        std::copy(mat.begin(), mat.end(), c.stain.matrix.begin());
        std::copy(off.begin(), off.end(), c.stain.offset.begin());
        cfg.centers.push_back(c);
    }

    cfg.pseudo_n = fetch<std::size_t>(j, "pseudo_n", "config");

    const json& js = section("ssl");
    check_keys(js, {"epochs", "learning_rate", "batch", "corrupt_grid", "corrupt_swaps", "pretext"},
               "ssl");
    cfg.ssl.epochs = fetch<std::size_t>(js, "epochs", "ssl");
    cfg.ssl.learning_rate = fetch<double>(js, "learning_rate", "ssl");
    cfg.ssl.batch = fetch<std::size_t>(js, "batch", "ssl");
    cfg.ssl.corrupt_grid = fetch<std::size_t>(js, "corrupt_grid", "ssl");
    cfg.ssl.corrupt_swaps = fetch<std::size_t>(js, "corrupt_swaps", "ssl");
    cfg.ssl.pretext = pretext_from_string(fetch<std::string>(js, "pretext", "ssl"));

    const json& jf = section("fl");
    check_keys(jf, {"rounds", "local_epochs", "learning_rate", "mu", "lambda", "batch",
                    "algorithm", "rho", "bt_centered", "eval_every", "ssl_init"},
               "fl");
    cfg.fl.rounds = fetch<std::size_t>(jf, "rounds", "fl");
    cfg.fl.local_epochs = fetch<std::size_t>(jf, "local_epochs", "fl");
    cfg.fl.learning_rate = fetch<double>(jf, "learning_rate", "fl");
    cfg.fl.mu = fetch<double>(jf, "mu", "fl");
    cfg.fl.lambda = fetch<double>(jf, "lambda", "fl");
    cfg.fl.batch = fetch<std::size_t>(jf, "batch", "fl");
    cfg.fl.algorithm = algorithm_from_string(fetch<std::string>(jf, "algorithm", "fl"));
    cfg.fl.rho = fetch<double>(jf, "rho", "fl");
    cfg.fl.bt_centered = fetch<bool>(jf, "bt_centered", "fl");
    cfg.fl.eval_every = fetch<std::size_t>(jf, "eval_every", "fl");
    cfg.fl.ssl_init = fetch_or<std::string>(jf, "ssl_init", "fl", "");

    const json& je = section("eval");
    check_keys(je, {"k_folds"}, "eval");
    cfg.k_folds = fetch<std::size_t>(je, "k_folds", "eval");

    const json& jpaths = section("paths");
    check_keys(jpaths, {"data", "checkpoints", "reports"}, "paths");
    cfg.paths.data = fetch<std::string>(jpaths, "data", "paths");
    cfg.paths.checkpoints = fetch<std::string>(jpaths, "checkpoints", "paths");
    cfg.paths.reports = fetch<std::string>(jpaths, "reports", "paths");

    cfg.validate();
    return cfg;
}

std::string config_to_json_text(const ExperimentConfig& cfg) {
    json j;
    j["schema_version"] = cfg.schema_version;
    j["master_seed"] = cfg.master_seed;
    j["model"] = {{"channels", cfg.model.channels},
                  {"height", cfg.model.height},
                  {"width", cfg.model.width},
                  {"encoder_widths", cfg.model.encoder_widths},
                  {"repr_dim", cfg.model.repr_dim},
                  {"proj_dim", cfg.model.proj_dim},
                  {"n_classes", cfg.model.n_classes},
                  {"n_centers", cfg.model.n_centers}};
    auto& jp = j["class_prototypes"] = json::array();
    for (const auto& p : cfg.class_prototypes) {
        json blobs = json::array();
        for (const auto& b : p.blobs) blobs.push_back({b[0], b[1]});
        jp.push_back({{"freq", p.freq},
                      {"angle", p.angle},
                      {"phase", p.phase},
                      {"wave_amp", p.wave_amp},
                      {"blobs", std::move(blobs)},
                      {"blob_amp", p.blob_amp},
                      {"blob_sigma", p.blob_sigma}});
    }
    auto& jc = j["centers"] = json::array();
    for (const auto& c : cfg.centers) {
        jc.push_back({{"center_id", c.center_id},
                      {"n_per_class", c.n_per_class},
                      {"noise_sigma", c.noise_sigma},
                      {"stain_matrix", c.stain.matrix},
                      {"stain_offset", c.stain.offset}});
    }
    j["pseudo_n"] = cfg.pseudo_n;
    j["ssl"] = {{"epochs", cfg.ssl.epochs},
                {"learning_rate", cfg.ssl.learning_rate},
                {"batch", cfg.ssl.batch},
                {"corrupt_grid", cfg.ssl.corrupt_grid},
                {"corrupt_swaps", cfg.ssl.corrupt_swaps},
                {"pretext", pretext_name(cfg.ssl.pretext)}};
    j["fl"] = {{"rounds", cfg.fl.rounds},
               {"local_epochs", cfg.fl.local_epochs},
               {"learning_rate", cfg.fl.learning_rate},
               {"mu", cfg.fl.mu},
               {"lambda", cfg.fl.lambda},
               {"batch", cfg.fl.batch},
               {"algorithm", algorithm_name(cfg.fl.algorithm)},
               {"rho", cfg.fl.rho},
               {"bt_centered", cfg.fl.bt_centered},
               {"eval_every", cfg.fl.eval_every},
               {"ssl_init", cfg.fl.ssl_init}};
    j["eval"] = {{"k_folds", cfg.k_folds}};
    j["paths"] = {{"data", cfg.paths.data},
                  {"checkpoints", cfg.paths.checkpoints},
                  {"reports", cfg.paths.reports}};
    return j.dump(2) + "\n";
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open '" + path + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return config_from_json_text(ss.str());
}

void save_config(const ExperimentConfig& cfg, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("config: cannot open '" + path + "' for writing");
    os << config_to_json_text(cfg);
    if (!os) throw DataError("config: write failed on '" + path + "'");
}

} // namespace fedsim
