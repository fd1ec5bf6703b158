#include "gist/kv_cache.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace gist {

double CacheCounters::ratio() const {
    if (peak_entries == 0) return 1.0;
    return static_cast<double>(positions) / static_cast<double>(peak_entries);
}

nlohmann::json CacheCounters::to_json() const {
    return {{"positions", positions},
            {"retained_entries", retained_entries},
            {"live_entries", live_entries},
            {"peak_entries", peak_entries},
            {"evicted_entries", evicted_entries},
            {"ratio", ratio()}};
}

GistKvCache::GistKvCache(std::uint32_t n_layers, std::uint32_t d_model) : n_layers_(n_layers), d_(d_model) {
    for (Region* r : {&retained_, &current_}) {
        r->keys.resize(n_layers);
        r->values.resize(n_layers);
    }
}

void GistKvCache::append(const KvEntry& e, std::span<const float* const> keys,
                         std::span<const float* const> values) {
    if (keys.size() != n_layers_ || values.size() != n_layers_) throw Error("cache/params mismatch");
    Region& r = region_for(e);
    r.entries.push_back(e);
    for (std::uint32_t l = 0; l < n_layers_; ++l) {
        r.keys[l].insert(r.keys[l].end(), keys[l], keys[l] + d_);
        r.values[l].insert(r.values[l].end(), values[l], values[l] + d_);
    }
    ++counters_.positions;
    counters_.retained_entries = retained_.entries.size();
    counters_.live_entries = retained_.entries.size() + current_.entries.size();
    counters_.peak_entries = std::max(counters_.peak_entries, counters_.live_entries);
}

void GistKvCache::close_sentence() {
    counters_.evicted_entries += current_.entries.size();
    current_.entries.clear();
    for (auto& k : current_.keys) k.clear();
    for (auto& v : current_.values) v.clear();
    counters_.live_entries = retained_.entries.size();
}

void GistKvCache::check() const {
    for (const auto& e : retained_.entries)
        if (e.role == kRegular) throw Error("regular entry in the retained region");
    for (const auto& e : current_.entries) {
        if (e.role != kRegular) throw Error("gist entry in the current region");
        if (e.sentence != current_.entries.front().sentence)
            throw Error("current region spans more than one sentence");
    }
    if (!retained_.entries.empty() && !current_.entries.empty() &&
        current_.entries.front().sentence <= retained_.entries.back().sentence)
        throw Error("current region holds a closed sentence");
    if (counters_.live_entries != retained_.entries.size() + current_.entries.size())
        throw Error("live entry count out of sync");
    for (const Region* r : {&retained_, &current_})
        for (std::uint32_t l = 0; l < n_layers_; ++l)
            if (r->keys[l].size() != r->entries.size() * d_ || r->values[l].size() != r->entries.size() * d_)
                throw Error("cache buffers out of sync");
}

CacheCounters simulate_cache(const AnnotatedSequence& a) {
    GistKvCache c(0, 0);
    for (std::size_t t = 0; t < a.size(); ++t) {
        c.append({static_cast<std::uint32_t>(t), a.ids[t], a.roles[t], a.sent_idx[t]}, {}, {});
        if (a.n_g > 0 && a.roles[t] == a.n_g) c.close_sentence();
    }
    return c.counters();
}

PrefillResult prefill(const ModelParams<float>& p, const AnnotatedSequence& a) {
    const ModelConfig& mc = p.config;
    if (a.size() == 0) throw Error("empty prompt");
    if (a.size() > mc.max_seq_len)
        throw Error("prompt length " + std::to_string(a.size()) + " exceeds max_seq_len " +
                    std::to_string(mc.max_seq_len));
    if (count_tokens(a).n_gist > 0 && a.n_g != mc.n_g)
        throw Error("prompt was segmented with n_g=" + std::to_string(a.n_g) + " but the model has n_g=" +
                    std::to_string(mc.n_g));
    if (a.is_gist(a.size() - 1) && a.roles.back() != mc.n_g) throw Error("prompt ends inside a gist run");

    ForwardOptions<float> opts;
    opts.capture_kv = true;
    auto out = forward<float>(p, a, build_mask(a), opts);

    PrefillResult r{GistKvCache(mc.n_layers, mc.d_model), {}};
    const std::size_t d = mc.d_model;
    std::vector<const float*> ks(mc.n_layers), vs(mc.n_layers);
    for (std::size_t t = 0; t < a.size(); ++t) {
        for (std::uint32_t l = 0; l < mc.n_layers; ++l) {
            ks[l] = out.keys[l].data() + t * d;
            vs[l] = out.values[l].data() + t * d;
        }
        r.cache.append({static_cast<std::uint32_t>(t), a.ids[t], a.roles[t], a.sent_idx[t]}, ks, vs);
        if (mc.n_g > 0 && a.roles[t] == mc.n_g) r.cache.close_sentence();
    }
    auto last = out.row(out.length - 1);
    r.logits.assign(last.begin(), last.end());
    return r;
}

DecodeSession::DecodeSession(const ModelParams<float>& params, const Vocab& vocab, SamplerConfig sampler)
    : p_(params), vocab_(vocab), sampler_(sampler), rng_(sampler.seed) {
    if (vocab.size() != params.config.vocab_size || vocab.gist_count() != params.config.n_g)
        throw Error("cache/params mismatch: vocab has " + std::to_string(vocab.size()) + " ids and " +
                    std::to_string(vocab.gist_count()) + " gists, model has " +
                    std::to_string(params.config.vocab_size) + " and " + std::to_string(params.config.n_g));
    if (!sampler.greedy && !(sampler.temperature > 0)) throw Error("temperature must be positive");
    seq_.n_g = params.config.n_g;
}

void DecodeSession::prefill(const AnnotatedSequence& prompt) {
    auto r = gist::prefill(p_, prompt);
    cache_ = std::move(r.cache);
    logits_ = std::move(r.logits);
    seq_ = prompt;
    seq_.n_g = p_.config.n_g;
    emitted_.clear();
    rng_.seed(sampler_.seed);
}

TokenId DecodeSession::sample() {
    if (logits_.empty()) throw Error("decode step before prefill");
    const std::size_t V = logits_.size();
    const auto gist_begin = static_cast<std::size_t>(vocab_.gist_first());
    const std::size_t live = std::min(V, gist_begin);
    if (sampler_.greedy) {
        return static_cast<TokenId>(std::max_element(logits_.begin(), logits_.begin() + live) - logits_.begin());
    }
    const double mx = *std::max_element(logits_.begin(), logits_.begin() + live);
    std::vector<double> w(live);
    for (std::size_t i = 0; i < live; ++i) w[i] = std::exp((logits_[i] - mx) / sampler_.temperature);
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    double u = std::uniform_real_distribution<double>(0.0, total)(rng_);
    for (std::size_t i = 0; i < live; ++i) {
        if (u < w[i]) return static_cast<TokenId>(i);
        u -= w[i];
    }
    return static_cast<TokenId>(live - 1);
}

TokenId DecodeSession::step() {
    const TokenId id = sample();
    emitted_.push_back(id);
    feed(id, kRegular);
    const std::uint32_t n_g = p_.config.n_g;
    if (n_g > 0 && vocab_.is_punct(id))
        for (std::uint32_t k = 1; k <= n_g; ++k) feed(vocab_.gist_id(k), static_cast<Role>(k));
    return id;
}

void DecodeSession::feed(TokenId id, Role role) {
    const ModelConfig& c = p_.config;
    const std::size_t d = c.d_model, ff = c.d_ff, V = c.vocab_size;
    const std::uint32_t hd = c.head_dim();
    const auto pos = static_cast<std::uint32_t>(seq_.size());
    if (pos >= c.max_seq_len) throw Error("decoding past max_seq_len " + std::to_string(c.max_seq_len));

    std::uint32_t sentence = 0;
    if (pos > 0) {
        sentence = seq_.sent_idx.back();
        if (role == kRegular && c.n_g > 0 && seq_.roles.back() == c.n_g) ++sentence;
    }

    std::vector<float> x(p_.embedding.begin() + std::size_t{id} * d, p_.embedding.begin() + (id + 1) * d);
    if (c.pos_encoding == PosEncoding::Learned)
        for (std::size_t j = 0; j < d; ++j) x[j] += p_.pos_embedding[pos * d + j];

    // Cached entries in position order; all of them are visible to this query.
    struct Src {
        std::uint32_t position;
        const GistKvCache::Region* region;
        std::size_t index;
    };
    std::vector<Src> order;
    for (const auto* r : {&cache_.retained(), &cache_.current()})
        for (std::size_t i = 0; i < r->entries.size(); ++i) order.push_back({r->entries[i].position, r, i});
    std::sort(order.begin(), order.end(), [](const Src& a, const Src& b) { return a.position < b.position; });

    std::vector<std::vector<float>> k_new(c.n_layers, std::vector<float>(d)), v_new(c.n_layers, std::vector<float>(d));
    std::vector<float> h(d), q(d), ctx(d), x_mid(d), u(ff), probs(order.size() + 1);
    std::vector<const float*> krows(order.size() + 1), vrows(order.size() + 1);
    for (std::uint32_t l = 0; l < c.n_layers; ++l) {
        const auto& L = p_.layers[l];
        rms_norm<float>(x, L.attn_norm, h);
        linear_rows(h.data(), 1, L.wq, d, d, q.data());
        linear_rows(h.data(), 1, L.wk, d, d, k_new[l].data());
        linear_rows(h.data(), 1, L.wv, d, d, v_new[l].data());
        if (c.pos_encoding == PosEncoding::Rotary) {
            apply_rope<float>(q, pos, c.n_heads, c.rope_base);
            apply_rope<float>(k_new[l], pos, c.n_heads, c.rope_base);
        }
        for (std::size_t j = 0; j < order.size(); ++j) {
            krows[j] = order[j].region->keys[l].data() + order[j].index * d;
            vrows[j] = order[j].region->values[l].data() + order[j].index * d;
        }
        krows.back() = k_new[l].data();
        vrows.back() = v_new[l].data();
        for (std::uint32_t hh = 0; hh < c.n_heads; ++hh)
            attend_head<float>(q.data() + hh * hd, krows, vrows, hh * hd, hd, probs.data(), ctx.data() + hh * hd);

        linear_rows(ctx.data(), 1, L.wo, d, d, x_mid.data());
        for (std::size_t j = 0; j < d; ++j) x_mid[j] += x[j];
        rms_norm<float>(x_mid, L.mlp_norm, h);
        linear_rows(h.data(), 1, L.w1, ff, d, u.data());
        for (auto& z : u) z = z / (1.0f + std::exp(-z));
        linear_rows(u.data(), 1, L.w2, d, ff, x.data());
        for (std::size_t j = 0; j < d; ++j) x[j] += x_mid[j];
    }
    rms_norm<float>(x, p_.final_norm, h);
    logits_.resize(V);
    linear_rows(h.data(), 1, c.tied_lm_head ? p_.embedding : p_.lm_head, V, d, logits_.data());

    std::vector<const float*> ks(c.n_layers), vs(c.n_layers);
    for (std::uint32_t l = 0; l < c.n_layers; ++l) {
        ks[l] = k_new[l].data();
        vs[l] = v_new[l].data();
    }
    cache_.append({pos, id, role, sentence}, ks, vs);
    seq_.ids.push_back(id);
    seq_.roles.push_back(role);
    seq_.sent_idx.push_back(sentence);
    seq_.open_tail = !(c.n_g > 0 && role == c.n_g);
    if (c.n_g > 0 && role == c.n_g) cache_.close_sentence();
}

}  // namespace gist
