#include "tetfit/config.hpp"

#include <cstdlib>
#include <sstream>

#include "io_util.hpp"

namespace tetfit {

bool RunConfig::operator==(const RunConfig& o) const {
    return seed == o.seed && threads == o.threads && resolution == o.resolution &&
           base == o.base && motion == o.motion && amplitude == o.amplitude &&
           period == o.period && frames == o.frames && mode == o.mode && slice_k == o.slice_k &&
           slice_placement == o.slice_placement && shape_iterations == o.shape_iterations &&
           shape_samples == o.shape_samples && init_radius == o.init_radius && model == o.model &&
           steps == o.steps && hidden == o.hidden && latent == o.latent &&
           motion_iterations == o.motion_iterations && motion_samples == o.motion_samples &&
           weights.cd == o.weights.cd && weights.sdf == o.weights.sdf &&
           weights.vol == o.weights.vol && weights.reg == o.weights.reg &&
           optimizer.kind == o.optimizer.kind && optimizer.lr == o.optimizer.lr &&
           optimizer.momentum == o.optimizer.momentum &&
           optimizer.weight_decay == o.optimizer.weight_decay &&
           optimizer.schedule == o.optimizer.schedule && squared_chamfer == o.squared_chamfer &&
           eval_samples == o.eval_samples && eval_seed == o.eval_seed &&
           acc_strict == o.acc_strict && acc_relaxed == o.acc_relaxed;
}

FitShapeConfig RunConfig::shape_config() const {
    FitShapeConfig c;
    c.iterations = shape_iterations;
    c.samples = shape_samples;
    c.weights = weights;
    c.optimizer = optimizer;
    c.seed = seed;
    c.squared_chamfer = squared_chamfer;
    return c;
}

FitMotionConfig RunConfig::motion_config() const {
    FitMotionConfig c;
    c.model = model;
    c.steps = steps;
    c.hidden = hidden;
    c.latent = latent;
    c.iterations = motion_iterations;
    c.samples = motion_samples;
    c.weights = weights;
    c.optimizer = optimizer;
    c.seed = seed;
    c.squared_chamfer = squared_chamfer;
    return c;
}

EvalConfig RunConfig::eval_config() const {
    EvalConfig c;
    c.samples = eval_samples;
    c.seed = eval_seed;
    c.acc_strict = acc_strict;
    c.acc_relaxed = acc_relaxed;
    c.squared_chamfer = squared_chamfer;
    c.config_echo = serialize_config(*this);
    return c;
}

SliceSpec RunConfig::slice_spec() const {
    SliceSpec s;
    s.k = slice_k;
    s.placement = slice_placement;
    return s;
}

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

long long parse_int(const std::string& key, const std::string& v) {
    char* end = nullptr;
    long long x = std::strtoll(v.c_str(), &end, 10);
    if (end == v.c_str() || *end != '\0')
        throw InvalidArgument("config key '" + key + "': bad integer '" + v + "'");
    return x;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    char* end = nullptr;
    unsigned long long x = std::strtoull(v.c_str(), &end, 10);
    if (end == v.c_str() || *end != '\0' || v.find('-') != std::string::npos)
        throw InvalidArgument("config key '" + key + "': bad unsigned integer '" + v + "'");
    return x;
}

double parse_double(const std::string& key, const std::string& v) {
    char* end = nullptr;
    double x = std::strtod(v.c_str(), &end);
    if (end == v.c_str() || *end != '\0')
        throw InvalidArgument("config key '" + key + "': bad number '" + v + "'");
    return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw InvalidArgument("config key '" + key + "': expected true or false, got '" + v + "'");
}

}  // namespace

RunConfig parse_config(const std::string& text) {
    RunConfig c;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw InvalidArgument("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string v = trim(line.substr(eq + 1));
        if (key.empty() || v.empty())
            throw InvalidArgument("config line " + std::to_string(lineno) + ": empty key or value");

        try {
            if (key == "seed") c.seed = parse_u64(key, v);
            else if (key == "threads") c.threads = static_cast<int>(parse_int(key, v));
            else if (key == "resolution") c.resolution = static_cast<int>(parse_int(key, v));
            else if (key == "base") c.base = base_shape_from_name(v);
            else if (key == "motion") c.motion = motion_kind_from_name(v);
            else if (key == "amplitude") c.amplitude = parse_double(key, v);
            else if (key == "period") c.period = static_cast<int>(parse_int(key, v));
            else if (key == "frames") c.frames = static_cast<int>(parse_int(key, v));
            else if (key == "mode") c.mode = observation_mode_from_name(v);
            else if (key == "slice_k") c.slice_k = static_cast<int>(parse_int(key, v));
            else if (key == "slice_placement") c.slice_placement = slice_placement_from_name(v);
            else if (key == "shape_iterations") c.shape_iterations = static_cast<int>(parse_int(key, v));
            else if (key == "shape_samples") c.shape_samples = static_cast<std::size_t>(parse_u64(key, v));
            else if (key == "init_radius") c.init_radius = parse_double(key, v);
            else if (key == "model") c.model = model_kind_from_name(v);
            else if (key == "steps") c.steps = static_cast<int>(parse_int(key, v));
            else if (key == "hidden") c.hidden = static_cast<int>(parse_int(key, v));
            else if (key == "latent") c.latent = static_cast<int>(parse_int(key, v));
            else if (key == "motion_iterations") c.motion_iterations = static_cast<int>(parse_int(key, v));
            else if (key == "motion_samples") c.motion_samples = static_cast<std::size_t>(parse_u64(key, v));
            else if (key == "cd_weight") c.weights.cd = parse_double(key, v);
            else if (key == "sdf_weight") c.weights.sdf = parse_double(key, v);
            else if (key == "vol_weight") c.weights.vol = parse_double(key, v);
            else if (key == "reg_weight") c.weights.reg = parse_double(key, v);
            else if (key == "optimizer") c.optimizer.kind = optimizer_kind_from_name(v);
            else if (key == "lr") c.optimizer.lr = parse_double(key, v);
            else if (key == "momentum") c.optimizer.momentum = parse_double(key, v);
            else if (key == "weight_decay") c.optimizer.weight_decay = parse_double(key, v);
            else if (key == "schedule") c.optimizer.schedule = lr_schedule_from_name(v);
            else if (key == "squared_chamfer") c.squared_chamfer = parse_bool(key, v);
            else if (key == "eval_samples") c.eval_samples = static_cast<std::size_t>(parse_u64(key, v));
            else if (key == "eval_seed") c.eval_seed = parse_u64(key, v);
            else if (key == "acc_strict") c.acc_strict = parse_double(key, v);
            else if (key == "acc_relaxed") c.acc_relaxed = parse_double(key, v);
            else throw InvalidArgument("unknown config key '" + key + "'");
        } catch (const InvalidArgument& e) {
            throw InvalidArgument("config line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return c;
}

std::string serialize_config(const RunConfig& c) {
    std::string out;
    auto kv = [&](const char* key, const std::string& v) {
        out += key;
        out += " = ";
        out += v;
        out += '\n';
    };
    kv("seed", std::to_string(c.seed));
    kv("threads", std::to_string(c.threads));
    kv("resolution", std::to_string(c.resolution));
    kv("base", base_shape_name(c.base));
    kv("motion", motion_kind_name(c.motion));
    kv("amplitude", ioutil::format_double(c.amplitude));
    kv("period", std::to_string(c.period));
    kv("frames", std::to_string(c.frames));
    kv("mode", observation_mode_name(c.mode));
    kv("slice_k", std::to_string(c.slice_k));
    kv("slice_placement", slice_placement_name(c.slice_placement));
    kv("shape_iterations", std::to_string(c.shape_iterations));
    kv("shape_samples", std::to_string(c.shape_samples));
    kv("init_radius", ioutil::format_double(c.init_radius));
    kv("model", model_kind_name(c.model));
    kv("steps", std::to_string(c.steps));
    kv("hidden", std::to_string(c.hidden));
    kv("latent", std::to_string(c.latent));
    kv("motion_iterations", std::to_string(c.motion_iterations));
    kv("motion_samples", std::to_string(c.motion_samples));
    kv("cd_weight", ioutil::format_double(c.weights.cd));
    kv("sdf_weight", ioutil::format_double(c.weights.sdf));
    kv("vol_weight", ioutil::format_double(c.weights.vol));
    kv("reg_weight", ioutil::format_double(c.weights.reg));
    kv("optimizer", optimizer_kind_name(c.optimizer.kind));
    kv("lr", ioutil::format_double(c.optimizer.lr));
    kv("momentum", ioutil::format_double(c.optimizer.momentum));
    kv("weight_decay", ioutil::format_double(c.optimizer.weight_decay));
    kv("schedule", lr_schedule_name(c.optimizer.schedule));
    kv("squared_chamfer", c.squared_chamfer ? "true" : "false");
    kv("eval_samples", std::to_string(c.eval_samples));
    kv("eval_seed", std::to_string(c.eval_seed));
    kv("acc_strict", ioutil::format_double(c.acc_strict));
    kv("acc_relaxed", ioutil::format_double(c.acc_relaxed));
    return out;
}

RunConfig load_config_file(const std::string& path) {
    return parse_config(ioutil::read_text_file(path));
}

void save_config_file(const std::string& path, const RunConfig& c) {
    ioutil::write_text_file(path, serialize_config(c));
}

}  // namespace tetfit
