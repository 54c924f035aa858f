#include "rfedit/config.hpp"

#include <fstream>
#include <sstream>

namespace rfedit::config {

namespace {

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::istringstream is(s);
    std::string part;
    while (std::getline(is, part, ',')) out.push_back(std::stoi(part));
    return out;
}

std::string join_int_list(const std::vector<int>& v) {
    std::ostringstream os;
    for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

std::string fmt(float v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

}  // namespace

void RunConfig::apply(const std::string& key, const std::string& value) {
    try {
        if (key == "model.grid_h") model.grid_h = std::stoi(value);
        else if (key == "model.grid_w") model.grid_w = std::stoi(value);
        else if (key == "model.channels") model.channels = std::stoi(value);
        else if (key == "model.blocks") model.blocks = std::stoi(value);
        else if (key == "model.heads") model.heads = std::stoi(value);
        else if (key == "model.head_dim") model.head_dim = std::stoi(value);
        else if (key == "model.mlp_mult") model.mlp_mult = std::stoi(value);
        else if (key == "model.cond_vocab") model.cond_vocab = std::stoi(value);
        else if (key == "model.injection_blocks") model.injection_blocks = parse_int_list(value);
        else if (key == "train.epochs") train.epochs = std::stoi(value);
        else if (key == "train.batch_size") train.batch_size = std::stoi(value);
        else if (key == "train.lr") train.lr = std::stof(value);
        else if (key == "train.cond_dropout") train.cond_dropout = std::stof(value);
        else if (key == "train.adapter_prob") train.adapter_prob = std::stof(value);
        else if (key == "edit.steps") schedule.steps = std::stoi(value);
        else if (key == "edit.k_front") schedule.k_front = std::stoi(value);
        else if (key == "edit.k_tail") schedule.k_tail = std::stoi(value);
        else if (key == "edit.tau") schedule.tau = std::stof(value);
        else if (key == "edit.sigma") schedule.sigma = std::stof(value);
        else if (key == "edit.guidance") schedule.guidance = std::stof(value);
        else if (key == "edit.injection_blocks") schedule.injection_blocks = parse_int_list(value);
        else if (key == "edit.adapter_lo") schedule.adapter_lo = std::stof(value);
        else if (key == "edit.adapter_hi") schedule.adapter_hi = std::stof(value);
        else if (key == "edit.beta1") schedule.beta1 = std::stof(value);
        else if (key == "edit.beta2") schedule.beta2 = std::stof(value);
        else if (key == "edit.adapter_enabled") schedule.adapter_enabled = value == "1" || value == "true";
        else if (key == "edit.solver") {
            if (value == "euler") schedule.solver = solver::SolverKind::Euler;
            else if (value == "second_order") schedule.solver = solver::SolverKind::SecondOrder;
            else throw ConfigError("unknown solver kind: " + value);
        }
        else if (key == "dataset.count") dataset_count = std::stoi(value);
        else if (key == "dataset.canvas") canvas = std::stoi(value);
        else if (key == "run.seed") seed = std::stoull(value);
        else if (key == "run.dataset_dir") dataset_dir = value;
        else if (key == "run.checkpoint") checkpoint = value;
        else if (key == "run.out_dir") out_dir = value;
        else throw ConfigError("unknown config key: " + key);
    } catch (const std::invalid_argument&) {
        throw ConfigError("bad value for " + key + ": " + value);
    } catch (const std::out_of_range&) {
        throw ConfigError("bad value for " + key + ": " + value);
    }
}

std::string RunConfig::serialize() const {
    std::ostringstream os;
    os << "[model]\n";
    os << "grid_h=" << model.grid_h << "\ngrid_w=" << model.grid_w << "\nchannels="
       << model.channels << "\nblocks=" << model.blocks << "\nheads=" << model.heads
       << "\nhead_dim=" << model.head_dim << "\nmlp_mult=" << model.mlp_mult << "\ncond_vocab="
       << model.cond_vocab << "\ninjection_blocks=" << join_int_list(model.injection_blocks)
       << "\n";
    os << "[train]\n";
    os << "epochs=" << train.epochs << "\nbatch_size=" << train.batch_size << "\nlr="
       << fmt(train.lr) << "\ncond_dropout=" << fmt(train.cond_dropout) << "\nadapter_prob="
       << fmt(train.adapter_prob) << "\n";
    os << "[edit]\n";
    os << "steps=" << schedule.steps << "\nk_front=" << schedule.k_front << "\nk_tail="
       << schedule.k_tail << "\ntau=" << fmt(schedule.tau) << "\nsigma=" << fmt(schedule.sigma)
       << "\nguidance=" << fmt(schedule.guidance) << "\ninjection_blocks="
       << join_int_list(schedule.injection_blocks) << "\nadapter_lo=" << fmt(schedule.adapter_lo)
       << "\nadapter_hi=" << fmt(schedule.adapter_hi) << "\nbeta1=" << fmt(schedule.beta1)
       << "\nbeta2=" << fmt(schedule.beta2) << "\nadapter_enabled="
       << (schedule.adapter_enabled ? 1 : 0) << "\nsolver="
       << (schedule.solver == solver::SolverKind::Euler ? "euler" : "second_order") << "\n";
    os << "[dataset]\n";
    os << "count=" << dataset_count << "\ncanvas=" << canvas << "\n";
    os << "[run]\n";
    os << "seed=" << seed << "\ndataset_dir=" << dataset_dir << "\ncheckpoint=" << checkpoint
       << "\nout_dir=" << out_dir << "\n";
    return os.str();
}

uint64_t RunConfig::hash() const { return fnv1a(serialize()); }

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path.string());
    RunConfig cfg;
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        auto first = line.find_first_not_of(" \t");
        if (first == std::string::npos) continue;
        auto last = line.find_last_not_of(" \t\r");
        line = line.substr(first, last - first + 1);
        if (line.empty() || line[0] == '#') continue;
        if (line.front() == '[' && line.back() == ']') {
            section = line.substr(1, line.size() - 2);
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
        if (section.empty())
            throw ConfigError("config line " + std::to_string(lineno) + ": key outside a section");
        cfg.apply(section + "." + line.substr(0, eq), line.substr(eq + 1));
    }
    return cfg;
}

void RunConfig::write_file(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write config: " + path.string());
    os << serialize();
}

}  // namespace rfedit::config
