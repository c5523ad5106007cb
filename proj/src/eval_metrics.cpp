#include "ace/eval_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "ace/instruction_codec.hpp"
#include "ace/util.hpp"

namespace ace::eval {

PixelDistances pixel_distances(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("pixel_distances: images differ in shape");
    if (a.data.empty()) return {};
    double l1 = 0.0, l2 = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        l1 += std::abs(d);
        l2 += d * d;
    }
    const auto n = static_cast<double>(a.data.size());
    return {l1 / n, l2 / n};
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: length mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine_similarity: zero vector");
    return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

namespace {

void normalize(Embedding& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (double& x : v) x /= n;
}

}  // namespace

Embedding ToyEmbedder::embed_image(const Image& image) const {
    if (image.empty() || (image.channels != 1 && image.channels != 3)) {
        throw std::invalid_argument("toy embedder expects a non-empty 1- or 3-channel image");
    }
    Embedding v(kDims, 0.0);
    std::vector<int> counts(kGrid * kGrid, 0);
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            const int cell = (y * kGrid / image.height) * kGrid + x * kGrid / image.width;
            ++counts[static_cast<std::size_t>(cell)];
            for (int c = 0; c < 3; ++c) {
                const float p = image.at(y, x, image.channels == 3 ? c : 0);
                v[static_cast<std::size_t>(cell * 3 + c)] += p - 0.5;
            }
        }
    }
    for (int cell = 0; cell < kGrid * kGrid; ++cell) {
        for (int c = 0; c < 3; ++c) v[static_cast<std::size_t>(cell * 3 + c)] /= std::max(1, counts[static_cast<std::size_t>(cell)]);
    }
    v.back() = 0.5;
    normalize(v);
    return v;
}

Embedding ToyEmbedder::embed_text(std::string_view text) const {
    Embedding v(kDims, 0.0);
    for (const auto& w : split_words(text)) v[fnv1a64(w) % (kDims - 1)] += 1.0;
    v.back() = 1.0;
    normalize(v);
    return v;
}

double embedding_similarity(const Image& a, const Image& b, const Embedder& embedder) {
    return cosine_similarity(embedder.embed_image(a), embedder.embed_image(b));
}

std::optional<double> direction_similarity(std::span<const double> image_delta, std::span<const double> text_delta) {
    if (image_delta.size() != text_delta.size()) throw std::invalid_argument("direction_similarity: length mismatch");
    auto zero = [](std::span<const double> v) {
        double n = 0.0;
        for (double x : v) n += x * x;
        return n < 1e-24;
    };
    if (zero(image_delta) || zero(text_delta)) return std::nullopt;
    return cosine_similarity(image_delta, text_delta);
}

std::optional<double> direction_similarity(const Image& src, const Image& out, std::string_view src_text,
                                           std::string_view out_text, const Embedder& embedder) {
    const auto is = embedder.embed_image(src), io = embedder.embed_image(out);
    const auto ts = embedder.embed_text(src_text), to = embedder.embed_text(out_text);
    Embedding di(is.size()), dt(ts.size());
    for (std::size_t i = 0; i < is.size(); ++i) di[i] = io[i] - is[i];
    for (std::size_t i = 0; i < ts.size(); ++i) dt[i] = to[i] - ts[i];
    return direction_similarity(di, dt);
}

EffectiveScore face_similarity_es(std::span<const double> scores, double mean, double std) {
    if (scores.empty()) throw std::invalid_argument("face_similarity_es: no scores");
    EffectiveScore r;
    r.threshold = mean - std;
    double sum = 0.0;
    std::size_t above = 0;
    for (double s : scores) {
        sum += s;
        above += s > r.threshold ? 1 : 0;
    }
    r.mean_score = sum / static_cast<double>(scores.size());
    r.es = static_cast<double>(above) / static_cast<double>(scores.size());
    return r;
}

int levenshtein(std::string_view a, std::string_view b) {
    std::vector<int> row(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) row[j] = static_cast<int>(j);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        int diag = row[0];
        row[0] = static_cast<int>(i);
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const int up = row[j];
            row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
            diag = up;
        }
    }
    return row[b.size()];
}

namespace {

std::vector<std::string> lines_of(std::string_view text) {
    std::vector<std::string> out;
    std::string line;
    std::istringstream is{std::string(text)};
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        out.push_back(line);
    }
    return out;
}

}  // namespace

TextScores text_metrics(std::string_view predicted, std::string_view reference) {
    const auto p = lines_of(predicted), r = lines_of(reference);
    const std::size_t n = std::max<std::size_t>({p.size(), r.size(), 1});
    double acc = 0.0, ned = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::string& a = i < p.size() ? p[i] : std::string();
        const std::string& b = i < r.size() ? r[i] : std::string();
        acc += a == b ? 1.0 : 0.0;
        const std::size_t longest = std::max(a.size(), b.size());
        ned += longest == 0 ? 1.0 : 1.0 - static_cast<double>(levenshtein(a, b)) / static_cast<double>(longest);
    }
    return {acc / static_cast<double>(n), ned / static_cast<double>(n)};
}

// ---------------------------------------------------------------------------

SampleMetrics MetricReport::mean(const std::string& category) const {
    SampleMetrics m;
    m.sample = "mean";
    m.category = category;
    std::size_t n = 0, nd = 0;
    double dir = 0.0;
    for (const auto& r : rows) {
        if (!category.empty() && r.category != category) continue;
        ++n;
        m.l1 += r.l1;
        m.l2 += r.l2;
        m.image_similarity += r.image_similarity;
        if (r.direction_similarity) {
            ++nd;
            dir += *r.direction_similarity;
        }
    }
    if (n > 0) {
        m.l1 /= static_cast<double>(n);
        m.l2 /= static_cast<double>(n);
        m.image_similarity /= static_cast<double>(n);
    }
    if (nd > 0) m.direction_similarity = dir / static_cast<double>(nd);
    return m;
}

std::vector<std::string> MetricReport::categories() const {
    std::set<std::string> s;
    for (const auto& r : rows) s.insert(r.category);
    return {s.begin(), s.end()};
}

std::string MetricReport::to_csv() const {
    std::ostringstream os;
    os.precision(8);
    auto row = [&](const SampleMetrics& m) {
        os << m.sample << ',' << m.category << ',' << m.l1 << ',' << m.l2 << ',' << m.image_similarity << ',';
        if (m.direction_similarity) os << *m.direction_similarity;
        else os << "undefined";
        os << '\n';
    };
    os << "sample,category,l1,l2,image_similarity,direction_similarity\n";
    for (const auto& r : rows) row(r);
    for (const auto& c : categories()) row(mean(c));
    row(mean());
    return os.str();
}

namespace {

bool is_image_file(const std::filesystem::path& p) {
    const auto ext = p.extension().string();
    return ext == ".png" || ext == ".ppm" || ext == ".pgm" || ext == ".pnm";
}

std::map<std::string, std::filesystem::path> images_by_stem(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
    std::map<std::string, std::filesystem::path> out;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (e.is_regular_file() && is_image_file(e.path())) out[e.path().stem().string()] = e.path();
    }
    return out;
}

}  // namespace

MetricReport evaluate_dirs(const EvalInputs& inputs, const Embedder& embedder) {
    const auto preds = images_by_stem(inputs.pred_dir);
    const auto refs = images_by_stem(inputs.ref_dir);
    std::map<std::string, std::filesystem::path> srcs;
    if (inputs.src_dir) srcs = images_by_stem(*inputs.src_dir);
    std::map<std::string, std::pair<std::string, std::string>> captions;
    if (inputs.captions) {
        std::ifstream in(*inputs.captions);
        if (!in) throw std::runtime_error("cannot read captions " + inputs.captions->string());
        std::string line;
        while (std::getline(in, line)) {
            std::istringstream ls(line);
            std::string name, a, b;
            if (std::getline(ls, name, '\t') && std::getline(ls, a, '\t') && std::getline(ls, b)) captions[name] = {a, b};
        }
    }
    if (preds.empty()) throw std::runtime_error("no prediction images in " + inputs.pred_dir.string());

    MetricReport report;
    for (const auto& [stem, path] : preds) {
        const auto ref = refs.find(stem);
        if (ref == refs.end()) throw std::runtime_error("no reference image for '" + stem + "'");
        const Image p = read_image(path), r = read_image(ref->second);
        SampleMetrics m;
        m.sample = stem;
        const auto dash = stem.rfind('-');
        m.category = dash == std::string::npos ? stem : stem.substr(0, dash);
        const auto d = pixel_distances(p, r);
        m.l1 = d.l1;
        m.l2 = d.l2;
        m.image_similarity = embedding_similarity(p, r, embedder);
        const auto src = srcs.find(stem);
        const auto cap = captions.find(stem);
        if (src != srcs.end() && cap != captions.end()) {
            m.direction_similarity =
                direction_similarity(read_image(src->second), p, cap->second.first, cap->second.second, embedder);
        }
        report.rows.push_back(std::move(m));
    }
    return report;
}

}  // namespace ace::eval
