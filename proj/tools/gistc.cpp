// gistc: command-line front end for the gist library.
//
//   gistc preprocess --corpus DIR --out DIR [--ng N] [--scheme byte|word]
//   gistc train      --config train.json --corpus DIR --out DIR [--resume]
//   gistc eval       --ckpt PATH --corpus DIR --out DIR [--ng 1,2,4,8] [--prefixes ...] [--modes ...]
//   gistc generate   --ckpt PATH --prompt TEXT [--max-new-tokens N] [--greedy | --temp T --seed S]
//   gistc mask-dump  --text TEXT [--ng N] [--format ascii|pgm]
//
// Exit status: 0 ok, 1 usage error, 2 runtime failure.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "gist/evaluation.hpp"
#include "gist/kv_cache.hpp"
#include "gist/mask.hpp"
#include "gist/model.hpp"
#include "gist/segmenter.hpp"
#include "gist/tokenizer.hpp"
#include "gist/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gist;

namespace {

bool g_quiet = false;

void progress(const std::string& line) {
    if (!g_quiet) std::cerr << line << '\n';
}

std::string hash_of(const json& j) { return hex64(fnv1a64(j.dump())); }

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write " + p.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("short write on " + p.string());
}

void prepare_out_dir(const fs::path& dir, bool force, bool resume = false) {
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir)) throw Error("--out is not a directory: " + dir.string());
        if (!fs::is_empty(dir) && !force && !resume)
            throw Error("refusing to overwrite " + dir.string() + " (pass --force)");
    }
    fs::create_directories(dir);
}

std::optional<std::uint64_t> env_seed() {
    const char* s = std::getenv("GIST_SEED");
    if (!s || !*s) return std::nullopt;
    char* end = nullptr;
    const auto v = std::strtoull(s, &end, 10);
    if (*end) throw Error(std::string("GIST_SEED is not an unsigned integer: ") + s);
    return v;
}

// A corpus directory holds either plain *.txt documents or the output of
// `preprocess` (manifest.json, vocab.json, shard.bin).
struct RawCorpus {
    std::vector<std::vector<TokenId>> docs;
    std::optional<Vocab> vocab;  // base vocab, set for preprocessed input
    std::vector<std::string> texts;
    std::string digest;
};

bool is_preprocessed(const fs::path& dir) {
    return fs::exists(dir / "manifest.json") && fs::exists(dir / "shard.bin");
}

RawCorpus load_corpus(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw Error("corpus is not a directory: " + dir.string());
    RawCorpus c;
    if (is_preprocessed(dir)) {
        auto manifest = json::parse(read_file(dir / "manifest.json"));
        c.vocab = Vocab::from_json(json::parse(read_file(dir / "vocab.json"))).with_gists(0);
        auto shard = read_shard(dir / "shard.bin");
        for (const auto& d : shard.documents) c.docs.push_back(strip_gists(d));
        c.digest = manifest.at("config_hash").get<std::string>();
        return c;
    }
    std::uint64_t h = fnv1a64("");
    for (auto& [path, text] : read_text_dir(dir)) {
        h = fnv1a64(path.filename().string(), h);
        h = fnv1a64(text, h);
        c.texts.push_back(std::move(text));
    }
    if (c.texts.empty()) throw Error("no *.txt documents in " + dir.string());
    c.digest = hex64(h);
    return c;
}

struct LoadedCheckpoint {
    ModelParams<float> params;
    Vocab vocab;
    std::string config_hash;
};

LoadedCheckpoint load_model(const fs::path& path) {
    CheckpointMeta meta;
    auto p = load_checkpoint(checkpoint_stem(path), &meta);
    if (!meta.extra.contains("vocab")) throw Error("checkpoint carries no vocab: " + path.string());
    auto v = Vocab::from_json(meta.extra.at("vocab"));
    return {std::move(p), std::move(v), meta.extra.value("config_hash", std::string())};
}

std::vector<LossMode> parse_modes(const std::vector<std::string>& names) {
    std::vector<LossMode> m;
    for (const auto& n : names) m.push_back(loss_mode_from_string(n));
    return m;
}

// ---- preprocess ----

struct PreprocessArgs {
    fs::path corpus, out, vocab;
    std::uint32_t n_g = 1;
    std::string scheme = "byte";
    bool label_period = false;
    bool force = false;
};

int run_preprocess(const PreprocessArgs& a) {
    auto docs = read_text_dir(a.corpus);
    if (docs.empty()) throw Error("no *.txt documents in " + a.corpus.string());
    if (a.label_period)
        for (auto& d : docs) d.second = add_label_period(d.second);

    std::vector<std::string> texts;
    for (const auto& d : docs) texts.push_back(d.second);
    const Vocab base = a.vocab.empty() ? build_vocab(texts, scheme_from_string(a.scheme))
                                       : Vocab::from_json(json::parse(read_file(a.vocab))).with_gists(0);
    const Vocab v = base.with_gists(a.n_g);
    auto corpus = encode_corpus(base, docs);

    std::uint64_t digest = fnv1a64("");
    json sources = json::array();
    for (const auto& [path, text] : docs) {
        digest = fnv1a64(path.filename().string(), digest);
        digest = fnv1a64(text, digest);
        sources.push_back(path.filename().string());
    }
    const json run = {{"command", "preprocess"}, {"n_g", a.n_g}, {"scheme", to_string(v.scheme())},
                      {"label_period", a.label_period}, {"vocab_hash", hex64(v.hash())},
                      {"corpus_digest", hex64(digest)}};
    const std::string hash = hash_of(run);

    prepare_out_dir(a.out, a.force);
    Shard shard;
    shard.n_g = a.n_g;
    shard.vocab_hash = hex64(v.hash());
    shard.config_hash = hash;
    TokenCounts total;
    for (const auto& d : corpus.documents) {
        shard.documents.push_back(segment(d, v, a.n_g));
        auto c = count_tokens(shard.documents.back());
        total.n_regular += c.n_regular;
        total.n_gist += c.n_gist;
    }
    write_shard(a.out / "shard.bin", shard);
    write_file(a.out / "vocab.json", v.to_json().dump(2) + "\n");
    json manifest = {{"schema", 1},
                     {"config_hash", hash},
                     {"run", run},
                     {"documents", corpus.documents.size()},
                     {"regular_tokens", total.n_regular},
                     {"gist_tokens", total.n_gist},
                     {"sources", sources}};
    write_file(a.out / "manifest.json", manifest.dump(2) + "\n");
    progress("preprocess: " + std::to_string(corpus.documents.size()) + " documents, " +
             std::to_string(total.n_regular) + " regular + " + std::to_string(total.n_gist) +
             " gist tokens, config " + hash);
    return 0;
}

// ---- train ----

struct TrainArgs {
    fs::path config, corpus, out, base_ckpt;
    bool resume = false;
    bool force = false;
};

int run_train(const TrainArgs& a) {
    auto cfg = PipelineConfig::from_json(json::parse(read_file(a.config)));
    if (auto s = env_seed()) cfg.seed = *s;
    cfg.validate();

    auto corpus = load_corpus(a.corpus);
    Vocab base_vocab;
    if (corpus.vocab) {
        base_vocab = *corpus.vocab;
        if (base_vocab.scheme() != cfg.scheme) throw Error("preprocessed corpus uses a different tokenizer scheme");
    } else {
        base_vocab = build_vocab(corpus.texts, cfg.scheme);
        for (const auto& t : corpus.texts) corpus.docs.push_back(base_vocab.encode(t));
    }

    std::optional<ModelParams<float>> base;
    if (!a.base_ckpt.empty()) {
        auto b = load_model(a.base_ckpt);
        if (b.vocab.hash() != base_vocab.hash()) throw Error("base checkpoint vocab does not match the corpus vocab");
        base = std::move(b.params);
    }

    prepare_out_dir(a.out, a.force, a.resume);
    PipelineOptions opts;
    opts.resume = a.resume;
    opts.on_step = [](const MetricRow& r) {
        if (r.step % 50 == 0) {
            char buf[160];
            std::snprintf(buf, sizeof buf, "step %llu %s lr %.3g loss %.4f reg %.4f gnorm %.3f",
                          static_cast<unsigned long long>(r.step), r.stage.c_str(), r.lr, r.loss_all,
                          r.loss_regular, r.grad_norm);
            progress(buf);
        }
    };
    auto r = run_pipeline(cfg, base_vocab, corpus.docs, base, a.out, opts);

    json run = {{"schema", 1},
                {"config_hash", r.config_hash},
                {"config", cfg.to_json()},
                {"corpus_digest", corpus.digest},
                {"documents", corpus.docs.size()}};
    write_file(a.out / "config.json", run.dump(2) + "\n");
    write_file(a.out / "vocab.json", r.vocab.to_json().dump(2) + "\n");
    if (!r.log.empty()) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "train: %zu steps, final loss %.4f, config %s", r.log.size(),
                      r.log.back().loss_all, r.config_hash.c_str());
        progress(buf);
    } else {
        progress("train: no steps, config " + r.config_hash);
    }
    return 0;
}

// ---- eval ----

struct EvalArgs {
    fs::path ckpt, corpus, out;
    std::vector<std::uint32_t> n_gs{1, 2, 4, 8};
    std::vector<std::uint32_t> prefixes;
    std::vector<std::string> modes{"all", "regular_only", "final_gist"};
    bool force = false;
};

int run_eval(const EvalArgs& a) {
    auto m = load_model(a.ckpt);
    auto corpus = load_corpus(a.corpus);
    if (corpus.vocab) {
        if (corpus.vocab->hash() != m.vocab.with_gists(0).hash())
            throw Error("preprocessed corpus vocab does not match the checkpoint");
    } else {
        for (const auto& t : corpus.texts) corpus.docs.push_back(m.vocab.encode(t));
    }
    EvalRequest req;
    req.n_gs = a.n_gs;
    req.prefixes = a.prefixes;
    req.modes = parse_modes(a.modes);

    json run = {{"command", "eval"}, {"checkpoint_config", m.config_hash},
                {"vocab_hash", hex64(m.vocab.hash())}, {"corpus_digest", corpus.digest},
                {"n_g", a.n_gs}, {"prefixes", a.prefixes}, {"modes", a.modes}};
    const std::string hash = hash_of(run);

    prepare_out_dir(a.out, a.force);
    auto report = eval_report(m.params, m.vocab, hash, corpus.docs, req);
    for (const auto& w : report.perplexity.warnings) std::cerr << "warning: " << w << '\n';
    write_file(a.out / "report.json", report.to_json().dump(2) + "\n");
    write_file(a.out / "curves.csv", curve_csv(report.perplexity));
    for (const auto& c : report.compression)
        progress("n_g " + std::to_string(c.n_g) + ": R_c " + c.rate.fixed2());
    progress(std::string("eval: halving ") + (report.halving_pass ? "holds" : "FAILS") + ", config " + hash);
    return 0;
}

// ---- generate ----

struct GenerateArgs {
    fs::path ckpt, prompt_file, out;
    std::string prompt;
    bool has_prompt = false;
    std::uint32_t max_new_tokens = 64;
    bool greedy = false;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    bool report_cache = false;
    bool bos = false;
    bool force = false;
};

int run_generate(GenerateArgs a) {
    auto m = load_model(a.ckpt);
    if (!a.prompt_file.empty()) a.prompt = read_file(a.prompt_file);
    if (auto s = env_seed()) a.seed = *s;
    const bool greedy = a.greedy || a.temperature == 0.0;

    std::vector<TokenId> raw;
    if (a.bos) raw.push_back(m.vocab.special().bos);
    auto enc = m.vocab.encode(a.prompt);
    raw.insert(raw.end(), enc.begin(), enc.end());
    const auto n_g = m.params.config.n_g;
    auto prompt = segment(raw, m.vocab, n_g);

    DecodeSession s(m.params, m.vocab, {greedy, greedy ? 1.0 : a.temperature, a.seed});
    s.prefill(prompt);
    std::string stop = "length";
    for (std::uint32_t i = 0; i < a.max_new_tokens; ++i) {
        if (s.sequence().size() + 1 + n_g > m.params.config.max_seq_len) {
            stop = "context";
            break;
        }
        if (s.step() == m.vocab.special().eos) {
            stop = "eos";
            break;
        }
    }
    std::vector<TokenId> out_ids;
    for (TokenId id : s.emitted())
        if (id != m.vocab.special().eos) out_ids.push_back(id);
    const std::string text = m.vocab.decode(out_ids);

    json run = {{"command", "generate"}, {"checkpoint_config", m.config_hash}, {"prompt", a.prompt},
                {"max_new_tokens", a.max_new_tokens}, {"greedy", greedy},
                {"temperature", greedy ? 0.0 : a.temperature}, {"seed", a.seed}, {"bos", a.bos}};
    const std::string hash = hash_of(run);
    json result = {{"schema", 1},
                   {"config_hash", hash},
                   {"prompt_positions", prompt.size()},
                   {"emitted", s.emitted().size()},
                   {"stop", stop},
                   {"text", text},
                   {"cache", s.report().to_json()}};

    if (!a.out.empty()) {
        prepare_out_dir(a.out, a.force);
        write_file(a.out / "generation.json", result.dump(2) + "\n");
    }
    if (a.report_cache)
        std::cout << result.dump(2) << '\n';
    else
        std::cout << text << '\n';
    return 0;
}

// ---- mask-dump ----

struct MaskArgs {
    std::string text;
    fs::path text_file, out;
    std::uint32_t n_g = 1;
    std::string scheme = "word";
    std::string format = "ascii";
    bool bos = false;
    bool force = false;
};

int run_mask_dump(MaskArgs a) {
    if (!a.text_file.empty()) a.text = read_file(a.text_file);
    const std::vector<std::string> texts{a.text};
    const Vocab v = build_vocab(texts, scheme_from_string(a.scheme)).with_gists(a.n_g);
    std::vector<TokenId> raw;
    if (a.bos) raw.push_back(v.special().bos);
    auto enc = v.encode(a.text);
    raw.insert(raw.end(), enc.begin(), enc.end());
    if (raw.empty()) throw Error("empty text");
    const auto seq = segment(raw, v, a.n_g);
    if (seq.size() > kMaxRenderSize)
        throw Error("sequence of " + std::to_string(seq.size()) + " positions exceeds the render limit of " +
                    std::to_string(kMaxRenderSize));
    const auto mask = build_mask(seq);
    const auto table = sentence_block_table(seq, mask);
    const bool pgm = a.format == "pgm";

    const json run = {{"command", "mask-dump"}, {"text", a.text}, {"n_g", a.n_g}, {"scheme", a.scheme},
                      {"bos", a.bos}};
    const std::string hash = hash_of(run);

    std::string rendered = render_mask(mask, pgm ? RenderFormat::Pgm : RenderFormat::Ascii);
    if (pgm) rendered.insert(3, "# config_hash " + hash + "\n");  // after "P5\n"

    json rows = json::array();
    std::ostringstream summary;
    char buf[160];
    std::snprintf(buf, sizeof buf, "positions %zu  sentences %u  density %.6f\n", seq.size(),
                  seq.sentence_count(), mask_density(mask));
    summary << buf << "sentence  begin    end  gists  prior_gists  allowed\n";
    for (const auto& r : table) {
        std::snprintf(buf, sizeof buf, "%8u %6u %6u %6u %12u %8zu\n", r.sentence, r.positions.begin,
                      r.positions.end, r.n_gist, r.visible_prior_gists, r.allowed_pairs);
        summary << buf;
        rows.push_back({{"sentence", r.sentence}, {"begin", r.positions.begin}, {"end", r.positions.end},
                        {"n_gist", r.n_gist}, {"visible_prior_gists", r.visible_prior_gists},
                        {"allowed_pairs", r.allowed_pairs}});
    }
    summary << "config_hash " << hash << '\n';

    if (!a.out.empty()) {
        prepare_out_dir(a.out, a.force);
        write_file(a.out / (pgm ? "mask.pgm" : "mask.txt"), pgm ? rendered : rendered + "\n");
        json tokens = json::array();
        for (std::size_t i = 0; i < seq.size(); ++i)
            tokens.push_back({{"surface", v.surface(seq.ids[i])}, {"role", seq.roles[i]},
                              {"sentence", seq.sent_idx[i]}});
        json info = {{"schema", 1}, {"config_hash", hash}, {"run", run}, {"positions", seq.size()},
                     {"density", mask_density(mask)}, {"tokens", tokens}, {"sentences", rows}};
        write_file(a.out / "mask.json", info.dump(2) + "\n");
        std::cout << summary.str();
    } else if (pgm) {
        std::cout.write(rendered.data(), static_cast<std::streamsize>(rendered.size()));
        std::cerr << summary.str();
    } else {
        std::cout << rendered << "\n\n" << summary.str();
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sentence-level gist token compression: preprocess, train, evaluate, generate."};
    app.name("gistc");
    app.require_subcommand(1);
    app.fallthrough();
    app.add_flag("-q,--quiet", g_quiet, "Suppress progress output");

    PreprocessArgs pre;
    auto* c_pre = app.add_subcommand("preprocess", "Tokenize a text corpus and write annotated shards");
    c_pre->add_option("--corpus", pre.corpus, "Directory of *.txt documents")->required()->check(CLI::ExistingDirectory);
    c_pre->add_option("--out", pre.out, "Output directory")->required();
    c_pre->add_option("--ng", pre.n_g, "Gist tokens per sentence")->check(CLI::Range(0u, 255u));
    c_pre->add_option("--scheme", pre.scheme, "Tokenizer scheme")->check(CLI::IsMember({"byte", "word"}));
    c_pre->add_option("--vocab", pre.vocab, "Reuse an existing vocab.json")->check(CLI::ExistingFile);
    c_pre->add_flag("--label-period", pre.label_period, "Append '.' to 'label: x' lines");
    c_pre->add_flag("--force", pre.force, "Overwrite existing output");

    TrainArgs tr;
    auto* c_tr = app.add_subcommand("train", "Run the base and gist training stages");
    c_tr->add_option("--config", tr.config, "Pipeline config JSON")->required()->check(CLI::ExistingFile);
    c_tr->add_option("--corpus", tr.corpus, "Text or preprocessed corpus directory")->required()->check(CLI::ExistingDirectory);
    c_tr->add_option("--out", tr.out, "Output directory")->required();
    c_tr->add_option("--base-ckpt", tr.base_ckpt, "Start from this base checkpoint");
    c_tr->add_flag("--resume", tr.resume, "Continue from the last stage boundary in --out");
    c_tr->add_flag("--force", tr.force, "Overwrite existing output");

    EvalArgs ev;
    auto* c_ev = app.add_subcommand("eval", "Compression rates, cache savings and perplexity curves");
    c_ev->add_option("--ckpt", ev.ckpt, "Checkpoint stem, .json or directory")->required();
    c_ev->add_option("--corpus", ev.corpus, "Text or preprocessed corpus directory")->required()->check(CLI::ExistingDirectory);
    c_ev->add_option("--out", ev.out, "Output directory for report.json and curves.csv")->required();
    c_ev->add_option("--ng", ev.n_gs, "Gist counts for the compression table")->delimiter(',');
    c_ev->add_option("--prefixes", ev.prefixes, "Prefix lengths in positions")->delimiter(',');
    c_ev->add_option("--modes", ev.modes, "Loss modes")->delimiter(',')
        ->check(CLI::IsMember({"all", "regular_only", "final_gist"}));
    c_ev->add_flag("--force", ev.force, "Overwrite existing output");

    GenerateArgs gen;
    auto* c_gen = app.add_subcommand("generate", "Decode with the compressed KV cache");
    c_gen->add_option("--ckpt", gen.ckpt, "Checkpoint stem, .json or directory")->required();
    auto* o_prompt = c_gen->add_option("--prompt", gen.prompt, "Prompt text");
    auto* o_pfile = c_gen->add_option("--prompt-file", gen.prompt_file, "Read the prompt from a file")
                        ->check(CLI::ExistingFile);
    o_prompt->excludes(o_pfile);
    c_gen->add_option("--max-new-tokens", gen.max_new_tokens, "Tokens to sample");
    auto* o_greedy = c_gen->add_flag("--greedy", gen.greedy, "Argmax decoding");
    auto* o_temp = c_gen->add_option("--temp", gen.temperature, "Sampling temperature")->check(CLI::PositiveNumber);
    o_greedy->excludes(o_temp);
    c_gen->add_option("--seed", gen.seed, "Sampling seed");
    c_gen->add_flag("--report-cache", gen.report_cache, "Print cache counters and ratio as JSON");
    c_gen->add_flag("--bos", gen.bos, "Prepend the BOS token");
    c_gen->add_option("--out", gen.out, "Also write generation.json here");
    c_gen->add_flag("--force", gen.force, "Overwrite existing output");

    MaskArgs mk;
    auto* c_mk = app.add_subcommand("mask-dump", "Render the sentence attention mask for a text");
    auto* o_text = c_mk->add_option("--text", mk.text, "Input text");
    auto* o_tfile = c_mk->add_option("--text-file", mk.text_file, "Read the text from a file")->check(CLI::ExistingFile);
    o_text->excludes(o_tfile);
    c_mk->add_option("--ng", mk.n_g, "Gist tokens per sentence")->check(CLI::Range(0u, 255u));
    c_mk->add_option("--scheme", mk.scheme, "Tokenizer scheme")->check(CLI::IsMember({"byte", "word"}));
    c_mk->add_option("--format", mk.format, "ascii or pgm")->check(CLI::IsMember({"ascii", "pgm"}));
    c_mk->add_flag("--bos", mk.bos, "Prepend the BOS token");
    c_mk->add_option("--out", mk.out, "Write mask and mask.json here");
    c_mk->add_flag("--force", mk.force, "Overwrite existing output");

    if (argc < 2) {
        std::cerr << app.help();
        return 1;
    }
    try {
        app.parse(argc, argv);
        if (c_gen->parsed() && !o_prompt->count() && !o_pfile->count())
            throw CLI::RequiredError("--prompt or --prompt-file");
        if (c_mk->parsed() && !o_text->count() && !o_tfile->count())
            throw CLI::RequiredError("--text or --text-file");
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "gistc: " << e.what() << "\n\n";
        auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        std::cerr << sub->help();
        return 1;
    }

    try {
        if (c_pre->parsed()) return run_preprocess(pre);
        if (c_tr->parsed()) return run_train(tr);
        if (c_ev->parsed()) return run_eval(ev);
        if (c_gen->parsed()) return run_generate(gen);
        if (c_mk->parsed()) return run_mask_dump(mk);
    } catch (const std::exception& e) {
        std::cerr << "gistc: error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
