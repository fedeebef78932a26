#include "mixdiff/synth.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mixdiff {

void WorldSpec::validate() const {
    if (n_classes < 2 || n_classes > 8) throw std::invalid_argument("world: n_classes must be in [2,8]");
    if (n_questions < 1 || n_questions > 6) throw std::invalid_argument("world: n_questions must be in [1,6]");
    if (vis_len < 1 || n_lat_tokens < 1) throw std::invalid_argument("world: block lengths must be positive");
    if (d_lat < 2) throw std::invalid_argument("world: d_lat must be >= 2");
    if (sigma <= 0.0) throw std::invalid_argument("world: sigma must be positive");
    // class components must be mutually separated by >= 6 sigma
    double min_dist = 2.0 * mean_radius * std::sin(M_PI / n_classes);
    if (min_dist < 6.0 * sigma)
        throw std::invalid_argument("world: class means closer than 6 sigma");
    if (ans_base + 8 > vocab_size - 2)
        throw std::invalid_argument("world: token blocks overflow content vocabulary");
}

std::string WorldSpec::serialize() const {
    std::ostringstream os;
    os << "format=mixdiff-world-v1\n";
    os << "n_classes=" << n_classes << "\n";
    os << "n_questions=" << n_questions << "\n";
    os << "vis_len=" << vis_len << "\n";
    os << "n_lat_tokens=" << n_lat_tokens << "\n";
    os << "d_lat=" << d_lat << "\n";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", sigma);
    os << "sigma=" << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", mean_radius);
    os << "mean_radius=" << buf << "\n";
    os << "vocab_size=" << vocab_size << "\n";
    os << "mask_id=" << mask_id << "\n";
    os << "eos_id=" << eos_id << "\n";
    return os.str();
}

WorldSpec WorldSpec::deserialize(const std::string& text) {
    WorldSpec w;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("world: bad line " + line);
        std::string key = line.substr(0, eq), value = line.substr(eq + 1);
        if (key == "format") {
            if (value != "mixdiff-world-v1") throw std::invalid_argument("world: unsupported format");
        } else if (key == "n_classes") w.n_classes = std::stoi(value);
        else if (key == "n_questions") w.n_questions = std::stoi(value);
        else if (key == "vis_len") w.vis_len = std::stoi(value);
        else if (key == "n_lat_tokens") w.n_lat_tokens = std::stoi(value);
        else if (key == "d_lat") w.d_lat = std::stoi(value);
        else if (key == "sigma") w.sigma = std::stod(value);
        else if (key == "mean_radius") w.mean_radius = std::stod(value);
        else if (key == "vocab_size") w.vocab_size = std::stoi(value);
        else if (key == "mask_id") w.mask_id = std::stoi(value);
        else if (key == "eos_id") w.eos_id = std::stoi(value);
        else throw std::invalid_argument("world: unknown key " + key);
    }
    w.validate();
    return w;
}

static uint64_t fnv1a_str(const std::string& s) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

uint64_t WorldSpec::digest() const { return fnv1a_str(serialize()); }

std::vector<double> WorldSpec::class_mean(int cls) const {
    std::vector<double> mu(d_lat, 0.0);
    double a = 2.0 * M_PI * cls / n_classes;
    mu[0] = mean_radius * std::cos(a);
    mu[1] = mean_radius * std::sin(a);
    return mu;
}

int WorldSpec::answer_len(int cls, int q) const { return 1 + 8 * q + cls; }

std::vector<int> WorldSpec::answer(int cls, int q) const {
    const int len = answer_len(cls, q);
    std::vector<int> out(len);
    if (q == 0) {
        for (int i = 0; i < len; ++i) out[i] = class_token(cls);
    } else {
        for (int i = 0; i < len; ++i) out[i] = ans_base + ((cls + q + i) % 8);
    }
    return out;
}

SegmentLayout UndSample::layout(int sample_id) const {
    SegmentLayout l;
    l.segments.push_back({Modality::VIS_ENC, Role::CONDITION, static_cast<int>(vis_tokens.size()), sample_id, 0, false});
    l.segments.push_back({Modality::TEXT, Role::PROMPT, static_cast<int>(prompt.size()), sample_id, 0, false});
    l.segments.push_back({Modality::TEXT, Role::RESPONSE, static_cast<int>(response.size()), sample_id, 0, false});
    return l;
}

std::vector<int> UndSample::all_tokens() const {
    std::vector<int> out = vis_tokens;
    out.insert(out.end(), prompt.begin(), prompt.end());
    out.insert(out.end(), response.begin(), response.end());
    return out;
}

SegmentLayout GenSample::layout(int sample_id) const {
    SegmentLayout l;
    l.segments.push_back({Modality::TEXT, Role::PROMPT, static_cast<int>(prompt.size()), sample_id, 0, false});
    l.segments.push_back({Modality::VIS_LAT, Role::TARGET, latent.rows(), sample_id, 0, false});
    return l;
}

SegmentLayout InterleavedSample::layout(int n_lat_tokens, int sample_id) const {
    SegmentLayout l;
    const int turns = static_cast<int>(classes.size());
    for (int k = 0; k < turns; ++k) {
        l.segments.push_back({Modality::TEXT, Role::PROMPT, 1, sample_id, k, false});
        l.segments.push_back({Modality::VIS_LAT, Role::TARGET, n_lat_tokens, sample_id, k, false});
    }
    return l;
}

UndSample gen_und_sample(const WorldSpec& spec, Rng& rng) {
    UndSample s;
    s.cls = static_cast<int>(rng.below(spec.n_classes));
    s.question = static_cast<int>(rng.below(spec.n_questions));
    s.vis_tokens.assign(spec.vis_len, spec.vis_token(s.cls));
    s.prompt = {spec.question_token(s.question)};
    s.response = spec.answer(s.cls, s.question);
    return s;
}

static LatentSequence draw_latent(const WorldSpec& spec, int cls, Rng& rng) {
    LatentSequence lat = Tensor::zeros({spec.n_lat_tokens, spec.d_lat});
    const auto mu = spec.class_mean(cls);
    for (int i = 0; i < spec.n_lat_tokens; ++i)
        for (int j = 0; j < spec.d_lat; ++j) lat.at(i, j) = mu[j] + spec.sigma * rng.normal();
    return lat;
}

GenSample gen_gen_sample(const WorldSpec& spec, Rng& rng) {
    GenSample s;
    s.cls = static_cast<int>(rng.below(spec.n_classes));
    s.prompt = {spec.class_token(s.cls)};
    s.latent = draw_latent(spec, s.cls, rng);
    return s;
}

InterleavedSample gen_interleaved_sample(const WorldSpec& spec, int turns, Rng& rng) {
    if (turns < 1) throw std::invalid_argument("interleaved: turns must be >= 1");
    InterleavedSample s;
    s.latents = Tensor::zeros({turns * spec.n_lat_tokens, spec.d_lat});
    int key = 0;  // running XOR of prompt classes; each turn's latent depends on all prior prompts
    for (int k = 0; k < turns; ++k) {
        int cls = static_cast<int>(rng.below(spec.n_classes));
        s.classes.push_back(cls);
        s.tokens.push_back(spec.class_token(cls));
        key ^= cls;
        LatentSequence lat = draw_latent(spec, key % spec.n_classes, rng);
        for (int i = 0; i < spec.n_lat_tokens; ++i)
            for (int j = 0; j < spec.d_lat; ++j)
                s.latents.at(k * spec.n_lat_tokens + i, j) = lat.at(i, j);
    }
    return s;
}

Rng sample_rng(const WorldSpec& spec, uint64_t seed, uint64_t index) {
    return Rng(hash_combine(spec.digest(), seed, index));
}

Corpus make_corpus(const WorldSpec& spec, int n_und, int n_gen, int n_inter, uint64_t seed) {
    spec.validate();
    Corpus c;
    c.spec = spec;
    c.seed = seed;
    c.und.reserve(n_und);
    c.gen.reserve(n_gen);
    c.inter.reserve(n_inter);
    for (int i = 0; i < n_und; ++i) {
        Rng rng = sample_rng(spec, seed, 0x10000000ULL + i);
        c.und.push_back(gen_und_sample(spec, rng));
    }
    for (int i = 0; i < n_gen; ++i) {
        Rng rng = sample_rng(spec, seed, 0x20000000ULL + i);
        c.gen.push_back(gen_gen_sample(spec, rng));
    }
    for (int i = 0; i < n_inter; ++i) {
        Rng rng = sample_rng(spec, seed, 0x30000000ULL + i);
        int turns = 2 + static_cast<int>(rng.below(2));  // 2 or 3 turns
        c.inter.push_back(gen_interleaved_sample(spec, turns, rng));
    }
    return c;
}

// ---------------------------------------------------------------------------
// persistence

static void write_tokens_line(std::ostream& os, const std::vector<int>& ids) {
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) os << " ";
        os << ids[i];
    }
    os << "\n";
}

static void write_doubles_line(std::ostream& os, const std::vector<double>& v) {
    char buf[64];
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) os << " ";
        std::snprintf(buf, sizeof(buf), "%.17g", v[i]);
        os << buf;
    }
    os << "\n";
}

static std::vector<int> parse_tokens_line(const std::string& line) {
    std::istringstream is(line);
    std::vector<int> out;
    int x;
    while (is >> x) out.push_back(x);
    return out;
}

static std::vector<double> parse_doubles_line(const std::string& line) {
    std::istringstream is(line);
    std::vector<double> out;
    double x;
    while (is >> x) out.push_back(x);
    return out;
}

void save_corpus(const Corpus& corpus, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    {
        std::ofstream os(dir + "/manifest.txt", std::ios::trunc);
        os << "format=mixdiff-corpus-v1\n";
        os << "spec_digest=" << corpus.spec.digest() << "\n";
        os << "seed=" << corpus.seed << "\n";
        os << "n_und=" << corpus.und.size() << "\n";
        os << "n_gen=" << corpus.gen.size() << "\n";
        os << "n_inter=" << corpus.inter.size() << "\n";
        os << corpus.spec.serialize();
        if (!os) throw std::runtime_error("corpus: cannot write manifest");
    }
    {
        std::ofstream lay(dir + "/und.layout.txt", std::ios::trunc);
        std::ofstream tok(dir + "/und.tokens.txt", std::ios::trunc);
        for (size_t i = 0; i < corpus.und.size(); ++i) {
            lay << serialize_layout(corpus.und[i].layout(static_cast<int>(i)));
            write_tokens_line(tok, corpus.und[i].all_tokens());
        }
    }
    {
        std::ofstream lay(dir + "/gen.layout.txt", std::ios::trunc);
        std::ofstream tok(dir + "/gen.tokens.txt", std::ios::trunc);
        std::ofstream val(dir + "/gen.latents.txt", std::ios::trunc);
        for (size_t i = 0; i < corpus.gen.size(); ++i) {
            lay << serialize_layout(corpus.gen[i].layout(static_cast<int>(i)));
            write_tokens_line(tok, corpus.gen[i].prompt);
            write_doubles_line(val, corpus.gen[i].latent.data);
        }
    }
    {
        std::ofstream lay(dir + "/inter.layout.txt", std::ios::trunc);
        std::ofstream tok(dir + "/inter.tokens.txt", std::ios::trunc);
        std::ofstream val(dir + "/inter.latents.txt", std::ios::trunc);
        for (size_t i = 0; i < corpus.inter.size(); ++i) {
            lay << serialize_layout(corpus.inter[i].layout(corpus.spec.n_lat_tokens, static_cast<int>(i)));
            write_tokens_line(tok, corpus.inter[i].tokens);
            write_doubles_line(val, corpus.inter[i].latents.data);
        }
    }
}

Corpus load_corpus(const std::string& dir) {
    Corpus c;
    size_t n_und = 0, n_gen = 0, n_inter = 0;
    uint64_t digest = 0;
    {
        std::ifstream is(dir + "/manifest.txt");
        if (!is) throw std::runtime_error("corpus: missing manifest in " + dir);
        std::string line, spec_block;
        bool in_spec = false;
        while (std::getline(is, line)) {
            if (line.rfind("format=mixdiff-world", 0) == 0) in_spec = true;
            if (in_spec) {
                spec_block += line + "\n";
                continue;
            }
            auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            std::string key = line.substr(0, eq), value = line.substr(eq + 1);
            if (key == "format" && value != "mixdiff-corpus-v1")
                throw std::runtime_error("corpus: unsupported format " + value);
            else if (key == "spec_digest") digest = std::stoull(value);
            else if (key == "seed") c.seed = std::stoull(value);
            else if (key == "n_und") n_und = std::stoul(value);
            else if (key == "n_gen") n_gen = std::stoul(value);
            else if (key == "n_inter") n_inter = std::stoul(value);
        }
        c.spec = WorldSpec::deserialize(spec_block);
        if (c.spec.digest() != digest) throw std::runtime_error("corpus: spec digest mismatch");
    }
    const WorldSpec& w = c.spec;
    {
        std::ifstream lay(dir + "/und.layout.txt");
        std::ifstream tok(dir + "/und.tokens.txt");
        std::string line;
        for (size_t i = 0; i < n_und; ++i) {
            SegmentLayout l = parse_layout_stream(lay, 3);
            if (!std::getline(tok, line)) throw std::runtime_error("corpus: truncated und tokens");
            std::vector<int> ids = parse_tokens_line(line);
            UndSample s;
            const int vl = l.segments.at(0).length, pl = l.segments.at(1).length;
            s.vis_tokens.assign(ids.begin(), ids.begin() + vl);
            s.prompt.assign(ids.begin() + vl, ids.begin() + vl + pl);
            s.response.assign(ids.begin() + vl + pl, ids.end());
            s.cls = s.vis_tokens.at(0) - w.vis_base;
            s.question = s.prompt.at(0) - w.q_base;
            c.und.push_back(std::move(s));
        }
    }
    {
        std::ifstream lay(dir + "/gen.layout.txt");
        std::ifstream tok(dir + "/gen.tokens.txt");
        std::ifstream val(dir + "/gen.latents.txt");
        std::string line;
        for (size_t i = 0; i < n_gen; ++i) {
            parse_layout_stream(lay, 2);
            GenSample s;
            if (!std::getline(tok, line)) throw std::runtime_error("corpus: truncated gen tokens");
            s.prompt = parse_tokens_line(line);
            if (!std::getline(val, line)) throw std::runtime_error("corpus: truncated gen latents");
            std::vector<double> v = parse_doubles_line(line);
            s.latent = Tensor({w.n_lat_tokens, w.d_lat}, std::move(v));
            s.cls = s.prompt.at(0) - w.class_base;
            c.gen.push_back(std::move(s));
        }
    }
    {
        std::ifstream lay(dir + "/inter.layout.txt");
        std::ifstream tok(dir + "/inter.tokens.txt");
        std::ifstream val(dir + "/inter.latents.txt");
        std::string line;
        for (size_t i = 0; i < n_inter; ++i) {
            InterleavedSample s;
            if (!std::getline(tok, line)) throw std::runtime_error("corpus: truncated inter tokens");
            s.tokens = parse_tokens_line(line);
            const int turns = static_cast<int>(s.tokens.size());
            parse_layout_stream(lay, 2 * turns);
            for (int k = 0; k < turns; ++k) s.classes.push_back(s.tokens[k] - w.class_base);
            if (!std::getline(val, line)) throw std::runtime_error("corpus: truncated inter latents");
            std::vector<double> v = parse_doubles_line(line);
            s.latents = Tensor({turns * w.n_lat_tokens, w.d_lat}, std::move(v));
            c.inter.push_back(std::move(s));
        }
    }
    return c;
}

}  // namespace mixdiff
