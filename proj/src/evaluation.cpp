#include "gist/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace gist {

namespace {

constexpr LossMode kAllModes[] = {LossMode::All, LossMode::RegularOnly, LossMode::FinalGist};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::size_t mode_index(LossMode m) { return static_cast<std::size_t>(m); }

nlohmann::json rate_json(const CompressionRate& r) {
    return {{"n_regular", r.n_regular}, {"n_gist", r.n_gist}, {"rate", r.value()}, {"rate_2dp", r.fixed2()}};
}

nlohmann::json optional_bool(const std::optional<bool>& b) { return b ? nlohmann::json(*b) : nlohmann::json(); }

std::optional<bool> optional_bool(const nlohmann::json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<bool>();
}

double number_or_nan(const nlohmann::json& j) {
    return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace

std::string CompressionRate::fixed2() const { return fmt("%.2f", value()); }

CompressionRate compression_rate(const AnnotatedSequence& a) {
    const auto c = count_tokens(a);
    if (c.n_gist == 0) throw Error("no gist tokens; rate undefined");
    return {c.n_regular, c.n_gist};
}

CompressionRate compression_rate(std::span<const AnnotatedSequence> docs) {
    CompressionRate r;
    for (const auto& a : docs) {
        const auto c = count_tokens(a);
        r.n_regular += c.n_regular;
        r.n_gist += c.n_gist;
    }
    if (r.n_gist == 0) throw Error("no gist tokens; rate undefined");
    return r;
}

HalvingCheck halving_property_check(const std::vector<std::vector<TokenId>>& raw, const Vocab& vocab,
                                    std::span<const std::uint32_t> n_gs) {
    HalvingCheck out;
    if (n_gs.empty()) return out;
    const Vocab v = vocab.with_gists(*std::max_element(n_gs.begin(), n_gs.end()));
    for (auto n_g : n_gs) {
        std::vector<AnnotatedSequence> docs;
        for (const auto& d : raw) docs.push_back(segment(d, v, n_g));
        out.rows.push_back({n_g, compression_rate(docs), std::nullopt});
    }
    for (auto& row : out.rows) {
        if (row.n_g % 2 != 0) continue;
        for (const auto& half : out.rows) {
            if (half.n_g * 2 != row.n_g) continue;
            // R(2k) == R(k) / 2  <=>  2 * reg(2k) * gist(k) == reg(k) * gist(2k)
            CompressionRate doubled{2 * row.rate.n_regular, row.rate.n_gist};
            row.halves_previous = same_rate(doubled, half.rate);
            out.pass = out.pass && *row.halves_previous;
            break;
        }
    }
    return out;
}

PerplexityCurve perplexity_curve(const ModelParams<float>& p, std::span<const AnnotatedSequence> docs,
                                 std::span<const std::uint32_t> prefixes, std::span<const LossMode> modes) {
    PerplexityCurve curve;
    curve.modes.assign(modes.begin(), modes.end());
    if (prefixes.empty()) return curve;
    for (auto P : prefixes) {
        if (P < 2) throw Error("prefix length must be at least 2");
        if (P > p.config.max_seq_len)
            throw Error("prefix length " + std::to_string(P) + " exceeds max_seq_len " +
                        std::to_string(p.config.max_seq_len));
    }
    const std::uint32_t longest = *std::max_element(prefixes.begin(), prefixes.end());

    std::vector<std::array<double, 3>> sums(prefixes.size(), {0, 0, 0});
    std::vector<PerplexityPoint> points(prefixes.size());
    for (std::size_t i = 0; i < prefixes.size(); ++i) points[i].prefix = prefixes[i];

    for (const auto& doc : docs) {
        const std::size_t n = std::min<std::size_t>(doc.size(), longest);
        if (n < 2) continue;
        const auto a = prefix(doc, n);
        const auto out = forward<float>(p, a, build_mask(a));
        for (auto mode : kAllModes) {
            const auto loss = lm_loss(out, a, mode);
            for (std::size_t i = 0; i < prefixes.size(); ++i) {
                const std::uint32_t P = prefixes[i];
                if (P > doc.size()) continue;
                double s = 0;
                std::size_t c = 0;
                for (std::size_t t = 0; t + 1 < P; ++t) {
                    if (!loss.contributing[t]) continue;
                    s += loss.per_position[t];
                    ++c;
                }
                sums[i][mode_index(mode)] += s;
                points[i].count[mode_index(mode)] += c;
            }
        }
        for (std::size_t i = 0; i < prefixes.size(); ++i)
            if (prefixes[i] <= doc.size()) ++points[i].documents;
    }

    for (std::size_t i = 0; i < prefixes.size(); ++i) {
        auto& pt = points[i];
        if (pt.documents == 0) {
            curve.warnings.push_back("prefix " + std::to_string(pt.prefix) + " is longer than every document; skipped");
            continue;
        }
        for (auto mode : kAllModes) {
            const auto m = mode_index(mode);
            pt.ppl[m] = pt.count[m] ? std::exp(sums[i][m] / static_cast<double>(pt.count[m]))
                                    : std::numeric_limits<double>::quiet_NaN();
        }
        curve.points.push_back(pt);
    }
    return curve;
}

std::string curve_csv(const PerplexityCurve& c) {
    std::string s = "prefix,documents";
    for (auto m : c.modes) s += ",ppl_" + std::string(to_string(m));
    s += '\n';
    for (const auto& pt : c.points) {
        s += std::to_string(pt.prefix) + "," + std::to_string(pt.documents);
        for (auto m : c.modes) s += "," + fmt("%.9g", pt.ppl[mode_index(m)]);
        s += '\n';
    }
    return s;
}

// ---------------------------------------------------------------- report

nlohmann::json EvalReport::to_json() const {
    nlohmann::json comp = nlohmann::json::array();
    for (const auto& e : compression) {
        auto j = rate_json(e.rate);
        j["n_g"] = e.n_g;
        j["halves_previous"] = optional_bool(e.halves_previous);
        j["cache"] = e.cache.to_json();
        comp.push_back(j);
    }
    nlohmann::json modes = nlohmann::json::array();
    for (auto m : perplexity.modes) modes.push_back(to_string(m));
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& pt : perplexity.points) {
        nlohmann::json ppl = nlohmann::json::object(), count = nlohmann::json::object();
        for (auto m : perplexity.modes) {
            const double v = pt.ppl[mode_index(m)];
            ppl[std::string(to_string(m))] = std::isfinite(v) ? nlohmann::json(v) : nlohmann::json();
            count[std::string(to_string(m))] = pt.count[mode_index(m)];
        }
        pts.push_back({{"prefix", pt.prefix}, {"documents", pt.documents}, {"ppl", ppl}, {"positions", count}});
    }
    return {{"schema", 1},
            {"config_hash", config_hash},
            {"checkpoint", checkpoint},
            {"compression", comp},
            {"halving_pass", halving_pass},
            {"perplexity", {{"modes", modes}, {"points", pts}, {"warnings", perplexity.warnings}}}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    if (j.at("schema").get<int>() != 1) throw Error("unsupported report schema");
    EvalReport r;
    r.config_hash = j.at("config_hash").get<std::string>();
    r.checkpoint = j.at("checkpoint");
    for (const auto& e : j.at("compression")) {
        CompressionEntry c;
        c.n_g = e.at("n_g").get<std::uint32_t>();
        c.rate = {e.at("n_regular").get<std::uint64_t>(), e.at("n_gist").get<std::uint64_t>()};
        c.halves_previous = optional_bool(e.at("halves_previous"));
        const auto& k = e.at("cache");
        c.cache.positions = k.at("positions").get<std::size_t>();
        c.cache.retained_entries = k.at("retained_entries").get<std::size_t>();
        c.cache.live_entries = k.at("live_entries").get<std::size_t>();
        c.cache.peak_entries = k.at("peak_entries").get<std::size_t>();
        c.cache.evicted_entries = k.at("evicted_entries").get<std::size_t>();
        r.compression.push_back(c);
    }
    r.halving_pass = j.at("halving_pass").get<bool>();
    const auto& pj = j.at("perplexity");
    for (const auto& m : pj.at("modes")) r.perplexity.modes.push_back(loss_mode_from_string(m.get<std::string>()));
    for (const auto& pt : pj.at("points")) {
        PerplexityPoint p;
        p.prefix = pt.at("prefix").get<std::uint32_t>();
        p.documents = pt.at("documents").get<std::size_t>();
        for (auto m : r.perplexity.modes) {
            const std::string name(to_string(m));
            p.ppl[mode_index(m)] = number_or_nan(pt.at("ppl").at(name));
            p.count[mode_index(m)] = pt.at("positions").at(name).get<std::size_t>();
        }
        r.perplexity.points.push_back(p);
    }
    r.perplexity.warnings = pj.at("warnings").get<std::vector<std::string>>();
    return r;
}

EvalReport eval_report(const ModelParams<float>& p, const Vocab& vocab, const std::string& config_hash,
                       const std::vector<std::vector<TokenId>>& raw, const EvalRequest& req) {
    const ModelConfig& mc = p.config;
    if (vocab.size() != mc.vocab_size || vocab.gist_count() != mc.n_g)
        throw Error("vocab does not match the checkpoint");
    EvalReport r;
    r.config_hash = config_hash;
    r.checkpoint = {{"n_g", mc.n_g},
                    {"vocab_size", mc.vocab_size},
                    {"vocab_hash", hex64(vocab.hash())},
                    {"parameters", p.parameter_count()}};

    if (!req.n_gs.empty()) {
        const auto check = halving_property_check(raw, vocab, req.n_gs);
        r.halving_pass = check.pass;
        const Vocab wide = vocab.with_gists(*std::max_element(req.n_gs.begin(), req.n_gs.end()));
        for (const auto& row : check.rows) {
            CompressionEntry e{row.n_g, row.rate, row.halves_previous, {}};
            // Each document is its own stream; counters add up.
            for (const auto& d : raw) {
                const auto c = simulate_cache(segment(d, wide, row.n_g));
                e.cache.positions += c.positions;
                e.cache.retained_entries += c.retained_entries;
                e.cache.live_entries += c.live_entries;
                e.cache.peak_entries += c.peak_entries;
                e.cache.evicted_entries += c.evicted_entries;
            }
            r.compression.push_back(e);
        }
    }

    std::vector<std::uint32_t> prefixes = req.prefixes;
    if (prefixes.empty())
        for (std::uint32_t P = 32; P <= mc.max_seq_len; P *= 2) prefixes.push_back(P);
    std::vector<AnnotatedSequence> docs;
    for (const auto& d : raw) {
        if (mc.n_g > 0) {
            docs.push_back(segment(d, vocab, mc.n_g));
            continue;
        }
        // A model without gists reads plain causal text.
        AnnotatedSequence a;
        a.ids = d;
        a.roles.assign(d.size(), kRegular);
        a.sent_idx.assign(d.size(), 0);
        a.open_tail = !d.empty();
        docs.push_back(std::move(a));
    }
    r.perplexity = perplexity_curve(p, docs, prefixes, req.modes);
    return r;
}

}  // namespace gist
