#include "ace/instruction_codec.hpp"

#include <cctype>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "ace/condition_unit.hpp"
#include "ace/util.hpp"

namespace ace {

Vocabulary::Vocabulary(VocabularyConfig config) : config_(config) {
    if (config_.max_image_number < 1) throw std::invalid_argument("max_image_number must be positive");
    if (config_.max_text_tokens < 1) throw std::invalid_argument("max_text_tokens must be positive");
    reserved_ = {"<pad>", "<unk>", "{image}"};
    for (int k = 1; k <= config_.max_image_number; ++k) reserved_.push_back(indicator_token(k));
    reserved_.push_back("{target}");
    if (config_.size <= reserved_count()) throw std::invalid_argument("vocabulary too small for reserved tokens");
}

int Vocabulary::indicator_id(int k) const {
    if (k < 1 || k > config_.max_image_number) {
        throw std::out_of_range("indicator id " + std::to_string(k) + " outside 1.." +
                                std::to_string(config_.max_image_number));
    }
    return 2 + k;
}

int Vocabulary::token_id(std::string_view token) const {
    for (int i = 0; i < reserved_count(); ++i) {
        if (reserved_[static_cast<std::size_t>(i)] == token) return i;
    }
    if (!token.empty() && token.front() == '{') return unk_id();
    const auto buckets = static_cast<std::uint64_t>(config_.size - reserved_count());
    return reserved_count() + static_cast<int>(fnv1a64(token, config_.hash_seed) % buckets);
}

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) words.push_back(std::move(cur));
        cur.clear();
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const unsigned char c = static_cast<unsigned char>(text[i]);
        if (c == '{') {
            const auto close = text.find('}', i);
            if (close != std::string_view::npos) {
                flush();
                std::string tok(text.substr(i, close - i + 1));
                for (auto& ch : tok) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
                words.push_back(std::move(tok));
                i = close;
                continue;
            }
        }
        if (std::isalnum(c) || c >= 0x80) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else {
            flush();
        }
    }
    flush();
    return words;
}

std::vector<int> Vocabulary::tokenize(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& w : split_words(text)) {
        if (static_cast<int>(ids.size()) == config_.max_text_tokens) break;
        ids.push_back(token_id(w));
    }
    return ids;
}

std::string Vocabulary::manifest() const {
    std::ostringstream os;
    os << "format = ace-vocab\n";
    os << "size = " << config_.size << '\n';
    os << "max_text_tokens = " << config_.max_text_tokens << '\n';
    os << "max_image_number = " << config_.max_image_number << '\n';
    os << "hash_seed = " << config_.hash_seed << '\n';
    for (std::size_t i = 0; i < reserved_.size(); ++i) os << "reserved." << i << " = " << reserved_[i] << '\n';
    return os.str();
}

Vocabulary Vocabulary::from_manifest(std::string_view text) {
    VocabularyConfig cfg;
    std::vector<std::pair<std::string, std::string>> reserved;
    std::istringstream is{std::string(text)};
    std::string line;
    bool seen_format = false;
    while (std::getline(is, line)) {
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 3);
        try {
            if (key == "format") {
                if (value != "ace-vocab") throw std::invalid_argument("not a vocabulary manifest");
                seen_format = true;
            } else if (key == "size") {
                cfg.size = std::stoi(value);
            } else if (key == "max_text_tokens") {
                cfg.max_text_tokens = std::stoi(value);
            } else if (key == "max_image_number") {
                cfg.max_image_number = std::stoi(value);
            } else if (key == "hash_seed") {
                cfg.hash_seed = std::stoull(value);
            } else if (key.rfind("reserved.", 0) == 0) {
                reserved.emplace_back(key, value);
            }
        } catch (const std::logic_error& e) {
            throw std::invalid_argument("bad vocabulary manifest entry '" + key + "': " + e.what());
        }
    }
    if (!seen_format) throw std::invalid_argument("not a vocabulary manifest");
    Vocabulary vocab(cfg);
    for (const auto& [key, value] : reserved) {
        const auto idx = std::stoul(key.substr(9));
        if (idx >= vocab.reserved_.size() || vocab.reserved_[idx] != value) {
            throw std::invalid_argument("reserved token table does not match manifest at " + key);
        }
    }
    return vocab;
}

template <typename S>
TextEncoder<S>::TextEncoder(const Vocabulary& vocab, int width, std::uint64_t seed)
    : vocab_(vocab), table_(vocab.size(), width) {
    if (width <= 0) throw std::invalid_argument("embedding width must be positive");
    Rng rng(derive_seed(seed, {0x7e47}));
    const double scale = 1.0 / std::sqrt(static_cast<double>(width));
    for (Eigen::Index r = 0; r < table_.rows(); ++r) {
        for (Eigen::Index c = 0; c < table_.cols(); ++c) table_(r, c) = static_cast<S>(normal_draw(rng) * scale);
    }
    table_.row(vocab_.pad_id()).setZero();
}

template <typename S>
TextEncoder<S>::TextEncoder(const Vocabulary& vocab, RowMatrix<S> table) : vocab_(vocab), table_(std::move(table)) {
    if (table_.rows() != vocab_.size()) throw std::invalid_argument("embedding table rows do not match vocabulary");
}

template <typename S>
RowMatrix<S> TextEncoder<S>::encode(const std::vector<int>& ids) const {
    if (ids.empty()) return table_.row(vocab_.pad_id());
    RowMatrix<S> out(static_cast<Eigen::Index>(ids.size()), table_.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= vocab_.size()) throw std::out_of_range("token id out of vocabulary range");
        out.row(static_cast<Eigen::Index>(i)) = table_.row(ids[i]);
    }
    return out;
}

template <typename S>
RowVector<S> TextEncoder<S>::indicator_embedding(int k) const {
    return table_.row(vocab_.indicator_id(k));
}

template <typename S>
RowVector<S> TextEncoder<S>::target_embedding() const {
    return table_.row(vocab_.target_id());
}

template class TextEncoder<float>;
template class TextEncoder<double>;

}  // namespace ace
