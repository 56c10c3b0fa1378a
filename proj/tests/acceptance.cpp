// Acceptance run: one PASS/FAIL line per criterion. Trains its own checkpoint
// into the work directory given as the first argument.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>

#include "decoy/gradcheck.hpp"
#include "decoy/harness.hpp"
#include "random_graph.hpp"

using namespace decoy;
namespace fs = std::filesystem;
using clock_type = std::chrono::steady_clock;

namespace {

double since(clock_type::time_point t0) { return std::chrono::duration<double>(clock_type::now() - t0).count(); }

struct Verdict {
    int id;
    std::string title;
    bool pass;
    std::string detail;
};

std::vector<Verdict> verdicts;
json report = json::object();

void record(int id, const std::string& title, bool pass, const std::string& detail) {
    verdicts.push_back({id, title, pass, detail});
    std::printf("%s %2d %s | %s\n", pass ? "PASS" : "FAIL", id, title.c_str(), detail.c_str());
    std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

int invoke(std::vector<std::string> args, fs::path* dir) {
    args.insert(args.begin(), "decoyctl");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    return cli_main(static_cast<int>(argv.size()), argv.data(), dir);
}

json read_json(const fs::path& p) {
    std::ifstream is(p);
    return json::parse(is);
}

std::map<std::string, std::string> artifacts(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file() && e.path().filename() != "manifest.json") {
            std::ifstream is(e.path(), std::ios::binary);
            out[fs::relative(e.path(), dir).string()] = {std::istreambuf_iterator<char>(is), {}};
        }
    return out;
}

double mean(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0 : s / static_cast<double>(v.size());
}

const std::vector<std::uint64_t> kSeeds{0, 1};

/// Per-pair metrics for protected inputs against the clean oracle.
struct PairSet {
    std::vector<PairMetrics> pairs;
    std::vector<double> oracle() const {
        std::vector<double> v;
        for (const auto& p : pairs)
            if (!std::isnan(p.oracle.content_mass_inpaint)) v.push_back(p.oracle.content_mass_inpaint);
        return v;
    }
    std::vector<double> prot() const {
        std::vector<double> v;
        for (const auto& p : pairs)
            if (!std::isnan(p.protected_.content_mass_inpaint)) v.push_back(p.protected_.content_mass_inpaint);
        return v;
    }
    /// Pairs whose morphed mask kept no inpaint cell have no masses.
    std::size_t defined() const {
        std::size_t n = 0;
        for (const auto& p : pairs) n += !std::isnan(p.oracle.content_mass_inpaint);
        return n;
    }
    double fraction_suppressed() const {
        std::size_t n = 0;
        for (const auto& p : pairs) n += p.protected_.content_mass_inpaint < p.oracle.content_mass_inpaint;
        return static_cast<double>(n) / static_cast<double>(defined());
    }
};

/// Oracle inpaints keyed by (image, seed, cfg, mask tag) so criteria share them.
class OracleCache {
public:
    explicit OracleCache(const Model<float>& m) : model_(m) {}
    const InpaintMeasure& get(const ImageCase& c, const Tensor<float>& mask, const std::string& tag,
                              const SamplerConfig& sc) {
        const auto key = std::tuple(c.index, sc.seed, sc.cfg_scale, tag);
        auto it = cache_.find(key);
        if (it == cache_.end()) it = cache_.emplace(key, measure_inpaint(model_, c, c.image, mask, sc)).first;
        return it->second;
    }

private:
    const Model<float>& model_;
    std::map<std::tuple<std::size_t, std::uint64_t, double, std::string>, InpaintMeasure> cache_;
};

PairSet measure_pairs(const Model<float>& model, OracleCache& oracles, const std::vector<ImageCase>& cases,
                      const std::vector<Tensor<float>>& protected_images, double cfg_scale,
                      const std::string& mask_mode = "none") {
    PairSet out;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const auto& c = cases[i];
        const Tensor<float> mask = morph_for_axis(c.mask, mask_mode);
        for (auto s : kSeeds) {
            SamplerConfig sc;
            sc.cfg_scale = cfg_scale;
            sc.seed = pair_seed(c.index, s);
            const auto& o = oracles.get(c, mask, mask_mode, sc);
            out.pairs.push_back(compare(o, measure_inpaint(model, c, protected_images[i], mask, sc)));
        }
    }
    return out;
}

struct Protections {
    std::vector<Tensor<float>> images;
    std::vector<AdversarialNoise> noise;
    double seconds = 0;
};

Protections protect_all(const Model<float>& model, const std::vector<ImageCase>& cases, const AttackConfig& ac) {
    Protections p;
    const auto t0 = clock_type::now();
    for (const auto& c : cases) {
        auto pc = protect_case(model, c, ac);
        p.images.push_back(pc.image);
        p.noise.push_back(std::move(pc.noise));
    }
    p.seconds = since(t0);
    return p;
}

/// Independent re-check of the final perturbations against the budget.
std::size_t budget_violations(const std::vector<ImageCase>& cases, const Protections& p, double eps) {
    std::size_t bad = 0;
    for (std::size_t i = 0; i < cases.size(); ++i)
        for (std::size_t k = 0; k < cases[i].image.numel(); ++k) {
            const double d = p.noise[i].delta[k], v = cases[i].image[k] + p.noise[i].delta[k];
            bad += std::abs(d) > eps + 1e-7 || v < 0 || v > 1;
        }
    return bad;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::string work;
    std::size_t n_images = 32;
    bool reuse = false;
    app.add_option("work", work, "work directory")->required();
    app.add_option("--images", n_images, "test images per criterion (pinned at 32)");
    app.add_flag("--reuse-checkpoint", reuse, "skip training when the work directory already holds a checkpoint");
    CLI11_PARSE(app, argc, argv);
    fs::create_directories(work);
    const auto t_all = clock_type::now();

    // ---- training, checked under 4; every other criterion needs the checkpoint
    const fs::path train_root = fs::path(work) / "train";
    fs::path ckpt_dir;
    double train_seconds = 0;
    json training;
    {
        if (reuse && fs::exists(train_root))
            for (const auto& e : fs::directory_iterator(train_root))
                if (fs::exists(e.path() / "checkpoint" / "manifest.json")) ckpt_dir = e.path();
        if (ckpt_dir.empty()) {
            const fs::path cfg = fs::path(work) / "train.json";
            std::ofstream(cfg) << json{{"seed", 0}}.dump() << "\n";
            fs::path dir;
            if (invoke({"train", "--config", cfg.string(), "--out", train_root.string()}, &dir) != 0) {
                std::fprintf(stderr, "training failed\n");
                return 1;
            }
            ckpt_dir = dir;
        }
        const auto man = read_json(ckpt_dir / "manifest.json");
        train_seconds = man.at("wall_time_s").get<double>();
        training = man.at("training");
    }
    const Model<float> model = load_checkpoint(ckpt_dir / "checkpoint");
    const auto cases = test_cases(kTestSeedBase, n_images);
    OracleCache oracles(model);
    std::vector<PairMetrics> all_pairs;

    // ---- 1. gradient suite
    {
        const auto t0 = clock_type::now();
        double worst_graph = 0;
        for (std::uint64_t seed = 0; seed < 50; ++seed) {
            decoy::testing::RandomGraph g(seed);
            Rng rng = make_rng(seed, 1);
            worst_graph = std::max(worst_graph, check_gradient<double>(g, randn<double>({4, 6}, rng), 1e-3));
        }
        const auto m = model.cast<double>();
        const auto ex = make_example(kTestSeedBase);
        std::vector<float> px(ex.image.data().begin(), ex.image.data().end());
        for (auto& v : px) v = 0.2f + 0.6f * v;  // keep clamps away from the evaluation point
        AttackConfig ac;
        ac.layer_selection = {64, 16, 4};
        const DecoySetup<double> setup(m, Tensor<float>({16, 16, 3}, px), ex.mask, ac);
        Rng rng = make_rng(77);
        const auto eps = randn<double>({64, 8}, rng);
        const auto d0 = rand_uniform<double>({16, 16, 3}, rng, -0.03, 0.03);
        const double lca = check_gradient<double>([&](const Tensor<double>& d) { return setup.loss(d, 35, eps); }, d0, 1e-6);
        const double secs = since(t0);
        report["c1"] = {{"graph_max_err", worst_graph}, {"lca_err", lca}, {"seconds", secs}};
        record(1, "gradient suite", worst_graph < 1e-4 && lca < 1e-3 && secs < 60,
               fmt("50 graphs max err %.3g (<1e-4); full L_CA err %.3g (<1e-3); %.1f s (<60 s)", worst_graph, lca, secs));
    }

    // ---- 2. BOS invariance
    {
        Rng rng = make_rng(2024);
        const auto& words = model.vocab.tokens();
        const auto ref = model.embed("");
        double worst = 0;
        for (int i = 0; i < 100; ++i) {
            std::vector<std::string> p;
            const int len = uniform_int(rng, 0, 8);
            for (int k = 0; k < len; ++k) p.push_back(words[static_cast<std::size_t>(uniform_int(rng, 2, static_cast<int>(words.size()) - 1))]);
            const auto e = model.embed(tokenize(model.vocab, p));
            for (std::size_t j = 0; j < e.width(); ++j)
                worst = std::max(worst, static_cast<double>(std::abs(e.matrix.at(0, j) - ref.matrix.at(0, j))));
        }
        const std::vector<std::string> base{"a", "red", "circle"};
        const auto e0 = model.embed(tokenize(model.vocab, base));
        std::size_t subs = 0, moved = 0;
        double min_move = 1e300;
        for (std::size_t pos = 0; pos < base.size(); ++pos)
            for (std::size_t w = 2; w < words.size(); ++w) {
                if (words[w] == base[pos]) continue;
                auto p = base;
                p[pos] = words[w];
                const auto e = model.embed(tokenize(model.vocab, p));
                double d = 0;
                for (std::size_t j = 0; j < e.width(); ++j) d += std::pow(e.matrix.at(e.first_eos(), j) - e0.matrix.at(e0.first_eos(), j), 2);
                ++subs;
                moved += d > 0;
                min_move = std::min(min_move, std::sqrt(d));
            }
        report["c2"] = {{"bos_max_diff", worst}, {"substitutions", subs}, {"moved", moved}, {"min_eos_l2", min_move}};
        record(2, "BOS invariance", worst < 1e-6 && moved == subs,
               fmt("row 0 max |diff| %.3g over 100 prompts (<1e-6); first EOS moved by %zu/%zu substitutions (min L2 %.3g)",
                   worst, moved, subs, min_move));
    }

    // ---- 3. decoy concentration
    {
        Rng rng = make_rng(303);
        double min_mass = 1, worst_rel = 0;
        const auto e = model.embed("masterpiece best quality");
        const TokenMask decoy = make_token_mask(e, DecoyTarget::bos);
        for (int i = 0; i < 20; ++i) {
            const auto x = randn<float>({kLatentTokens, 2 * kLatentChannels + 1}, rng);
            const auto t = static_cast<std::size_t>(uniform_int(rng, 1, 100));
            const auto dual = dual_forward(model.predictor, x, t, e, decoy, kDecoyBias);
            for (const auto& l : dual.masked.layers) {
                const auto v = ops::matmul(e.matrix, model.predictor.stages[l.id.index].ca.wv);
                double vn = 0;
                for (std::size_t c = 0; c < v.dim(1); ++c) vn += std::pow(v.at(0, c), 2);
                vn = std::sqrt(vn);
                for (std::size_t r = 0; r < l.attention.dim(0); ++r) {
                    min_mass = std::min(min_mass, static_cast<double>(l.attention.at(r, 0)));
                    double dn = 0;
                    for (std::size_t c = 0; c < v.dim(1); ++c) dn += std::pow(l.output.at(r, c) - v.at(0, c), 2);
                    worst_rel = std::max(worst_rel, std::sqrt(dn) / vn);
                }
            }
        }
        report["c3"] = {{"min_decoy_mass", min_mass}, {"max_rel_err", worst_rel}};
        record(3, "decoy concentration", min_mass >= 1 - 1e-3 && worst_rel <= 1e-3,
               fmt("min decoy mass %.6f (>=0.999); max relative |CA - V_decoy| %.3g (<=1e-3)", min_mass, worst_rel));
    }

    // ---- 4. training sanity
    {
        std::vector<double> dom, content, bos;
        for (const auto& c : cases) {
            SamplerConfig sc;
            sc.seed = pair_seed(c.index, 0);
            const auto& o = oracles.get(c, c.mask, "none", sc);
            dom.push_back(o.dominance);
            content.push_back(o.masses.content_mass_inpaint);
            bos.push_back(o.masses.bos_mass_inpaint);
        }
        const double ema = training.at("final_ema").get<double>();
        const auto steps = training.at("steps").get<std::size_t>();
        report["c4"] = {{"final_ema", ema}, {"steps", steps}, {"train_seconds", train_seconds}, {"mean_dominance", mean(dom)},
                        {"mean_content", mean(content)}, {"mean_bos", mean(bos)}};
        record(4, "training sanity",
               ema < 0.08 && steps <= 20000 && mean(dom) > 0.2 && mean(content) > mean(bos) && train_seconds < 900,
               fmt("EMA loss %.4f after %zu steps (<0.08, <=20k); dominance %.3f (>0.2); content %.3f vs BOS %.3f; "
                   "train %.0f s (<900 s)",
                   ema, steps, mean(dom), mean(content), mean(bos), train_seconds));
    }

    // ---- 5. attack efficacy (default protection, reused by 6, 9 and 11)
    AttackConfig def_attack;
    def_attack.seed = 0;
    const auto t5 = clock_type::now();
    const Protections def = protect_all(model, cases, def_attack);
    PairSet at75 = measure_pairs(model, oracles, cases, def.images, 7.5);
    {
        const double secs = since(t5);
        double sum0 = 0, sum1 = 0, worst = 1;
        for (const auto& n : def.noise) {
            sum0 += n.initial_probe();
            sum1 += n.final_probe();
            worst = std::min(worst, 1 - n.final_probe() / n.initial_probe());
        }
        const double reduction = 1 - sum1 / sum0, frac = at75.fraction_suppressed();
        report["c5"] = {{"probe_reduction", reduction}, {"worst_image_reduction", worst}, {"suppressed_fraction", frac},
                        {"mean_oracle", mean(at75.oracle())}, {"mean_protected", mean(at75.prot())},
                        {"protect_seconds", def.seconds}, {"seconds", secs}};
        record(5, "attack efficacy", worst >= 0.8 && frac >= 0.9 && secs < 1200,
               fmt("probe L_CA reduction %.1f%% overall, worst image %.1f%% (>=80%% per image); protected<oracle in %.1f%% of pairs (>=90%%); "
                   "content %.4f -> %.4f; %.0f s (<1200 s)",
                   100 * reduction, 100 * worst, 100 * frac, mean(at75.oracle()), mean(at75.prot()), secs));
        all_pairs.insert(all_pairs.end(), at75.pairs.begin(), at75.pairs.end());
    }

    // ---- 6. CFG robustness
    {
        std::vector<double> ws{5.0, 7.5, 10.0, 12.5, 15.0}, mo, mp;
        bool below = true;
        std::string curve;
        for (double w : ws) {
            const PairSet ps = w == 7.5 ? at75 : measure_pairs(model, oracles, cases, def.images, w);
            if (w != 7.5) all_pairs.insert(all_pairs.end(), ps.pairs.begin(), ps.pairs.end());
            mo.push_back(mean(ps.oracle()));
            mp.push_back(mean(ps.prot()));
            below = below && mp.back() < mo.back();
            curve += fmt(" w=%.1f %.4f/%.4f", w, mo.back(), mp.back());
        }
        const double rise = mp.back() - mp.front(), gap = mo.front() - mp.front();
        report["c6"] = {{"cfg", ws}, {"oracle", mo}, {"protected", mp}};
        record(6, "CFG robustness", below && rise < gap,
               fmt("oracle/protected:%s; protected rise %.4f < gap at w=5 %.4f", curve.c_str(), rise, gap));
    }

    // ---- 7. ablation orderings
    {
        AttackConfig eos = def_attack, null = def_attack;
        eos.decoy_target = DecoyTarget::first_eos;
        null.base_prompt = BasePromptKind::null;
        const auto pe = measure_pairs(model, oracles, cases, protect_all(model, cases, eos).images, 7.5);
        const auto pn = measure_pairs(model, oracles, cases, protect_all(model, cases, null).images, 7.5);
        const double o = mean(at75.oracle()), q = mean(at75.prot()), e = mean(pe.prot()), n = mean(pn.prot());
        const bool eos_lost = std::abs(e - o) <= 0.1 * o;
        const bool null_worse = n < o && n > q;
        report["c7"] = {{"oracle", o}, {"quality_tag", q}, {"first_eos", e}, {"null", n}};
        record(7, "ablation orderings", eos_lost && null_worse,
               fmt("oracle %.4f; FIRST_EOS %.4f (within 10%%: %s); NULL %.4f between QUALITY_TAG %.4f and oracle: %s", o, e,
                   eos_lost ? "yes" : "no", n, q, null_worse ? "yes" : "no"));
    }

    // ---- 8. layer selection
    {
        SamplerConfig sc;
        const auto res = run_sweep(model, SweepAxis::layer_selection, {{"16+4", 0}, {"64+16", 0}}, cases, kSeeds, sc, def_attack);
        std::map<std::string, std::vector<double>> prot;
        for (const auto& r : res.rows) prot[r.value].push_back(r.metrics.protected_.content_mass_inpaint);
        const double a = mean(prot["16+4"]), b = mean(prot["64+16"]);
        report["c8"] = {{"16+4", a}, {"64+16", b}};
        record(8, "layer-selection ordering", a < b, fmt("protected content {16,4} %.4f < {64,16} %.4f", a, b));
    }

    // ---- 9. unseen masks
    {
        bool ok = true;
        std::string detail;
        for (const std::string mode : {"shrink", "expand"}) {
            const auto ps = measure_pairs(model, oracles, cases, def.images, 7.5, mode);
            all_pairs.insert(all_pairs.end(), ps.pairs.begin(), ps.pairs.end());
            const double f = ps.fraction_suppressed();
            ok = ok && f >= 0.75;
            ok = ok && ps.defined() > 0;
            report["c9"][mode] = {{"suppressed_fraction", f}, {"defined_pairs", ps.defined()}, {"pairs", ps.pairs.size()},
                                  {"oracle", mean(ps.oracle())}, {"protected", mean(ps.prot())}};
            detail += fmt("%s%s (%s KEEP): protected<oracle in %.1f%% of %zu/%zu pairs with an inpaint cell left",
                          detail.empty() ? "" : "; ", mode.c_str(), mode == "shrink" ? "dilate" : "erode", 100 * f,
                          ps.defined(), ps.pairs.size());
        }
        record(9, "unseen masks", ok, detail + " (>=75% each)");
    }

    // ---- 10. budget sweep
    {
        SamplerConfig sc;
        const std::vector<SweepValue> vals{{"4/255", 4.0 / 255}, {"8/255", 8.0 / 255}, {"12/255", 12.0 / 255}, {"16/255", 16.0 / 255}};
        const auto res = run_sweep(model, SweepAxis::epsilon, vals, cases, kSeeds, sc, def_attack);
        std::vector<double> m;
        std::string curve;
        for (const auto& v : vals) {
            std::vector<double> p;
            for (const auto& r : res.rows)
                if (r.value == v.text) {
                    p.push_back(r.metrics.protected_.content_mass_inpaint);
                    all_pairs.push_back(r.metrics);
                }
            m.push_back(mean(p));
            curve += fmt(" %s %.4f", v.text.c_str(), m.back());
        }
        std::size_t inversions = 0;
        double worst = 0;
        for (std::size_t i = 1; i < m.size(); ++i)
            if (m[i] > m[i - 1]) {
                ++inversions;
                worst = std::max(worst, m[i] - m[i - 1]);
            }
        const bool ok = inversions == 0 || (inversions == 1 && worst <= 0.01);
        report["c10"] = {{"protected", m}, {"inversions", inversions}, {"worst_inversion", worst}};
        record(10, "budget sweep", ok,
               fmt("protected content:%s; %zu inversion(s), largest %.4f (<=1 within 0.01)", curve.c_str(), inversions, worst));
    }

    // ---- 11. mechanical invariants
    {
        const std::size_t budget_bad = budget_violations(cases, def, def_attack.epsilon);
        double row_err = 0;
        for (std::size_t i = 0; i < std::min<std::size_t>(cases.size(), 4); ++i) {
            SamplerConfig sc;
            sc.seed = pair_seed(cases[i].index, 0);
            const auto res = sample_inpaint(model, cases[i].image, cases[i].mask, model.tokens(cases[i].prompt), sc, true);
            for (const auto& tr : res.traces)
                for (const auto& l : tr.layers)
                    for (std::size_t r = 0; r < l.attention.dim(0); ++r) {
                        double s = 0;
                        for (std::size_t k = 0; k < l.attention.dim(1); ++k) s += l.attention.at(r, k);
                        row_err = std::max(row_err, std::abs(s - 1));
                    }
        }
        double part_err = 0;
        for (const auto& p : all_pairs)
            for (const auto& r : {p.oracle, p.protected_})
                if (!std::isnan(r.content_mass_inpaint))
                    part_err = std::max(part_err, std::abs(r.content_mass_inpaint + r.bos_mass_inpaint + r.eos_mass_inpaint - 1));

        const fs::path cfg = fs::path(work) / "repro.json";
        std::ofstream(cfg) << json{{"seed", 5}, {"checkpoint", (ckpt_dir / "checkpoint").string()}, {"data", {{"count", 2}}}}.dump();
        bool identical = true;
        for (const std::string cmd : {"protect", "evaluate"}) {
            fs::path a, b;
            const int ca = invoke({cmd, "--config", cfg.string(), "--out", (fs::path(work) / "repro_a").string()}, &a);
            const int cb = invoke({cmd, "--config", cfg.string(), "--out", (fs::path(work) / "repro_b").string()}, &b);
            identical = identical && ca == 0 && cb == 0 && artifacts(a) == artifacts(b);
        }
        const std::size_t steps = cases.size() * def_attack.iterations;
        report["c11"] = {{"budget_violations", budget_bad}, {"pgd_steps_asserted", steps}, {"row_sum_err", row_err},
                         {"partition_err", part_err}, {"byte_identical", identical}};
        record(11, "mechanical invariants", budget_bad == 0 && row_err < 1e-5 && part_err < 1e-3 && identical,
               fmt("%zu PGD steps asserted in-loop, %zu final violations; row-sum err %.2g; partition err %.2g; "
                   "reruns byte-identical: %s",
                   steps, budget_bad, row_err, part_err, identical ? "yes" : "no"));
    }

    // ---- 12. efficiency manifest
    {
        const fs::path cfg = fs::path(work) / "efficiency.json";
        std::ofstream(cfg) << json{{"seed", 0}, {"checkpoint", (ckpt_dir / "checkpoint").string()}}.dump();
        fs::path ca_dir, np_dir;
        const fs::path out = fs::path(work) / "efficiency";
        const int c1 = invoke({"protect", "--config", cfg.string(), "--out", out.string()}, &ca_dir);
        const int c2 = invoke({"protect", "--config", cfg.string(), "--out", out.string(), "--objective=noise-pred"}, &np_dir);
        bool ok = c1 == 0 && c2 == 0;
        double wall = 0, per_ca = 0, per_np = 0;
        long rss = 0;
        if (ok) {
            const auto m1 = read_json(ca_dir / "manifest.json"), m2 = read_json(np_dir / "manifest.json");
            ok = m1.contains("wall_time_s") && m1.contains("peak_rss_kb") && m1["config"]["attack.iterations"] == 400 &&
                 m2["config"]["attack.iterations"] == 400;
            wall = m1["protect_seconds"][0].get<double>();
            rss = m1["peak_rss_kb"].get<long>();
            per_ca = m1["protect_seconds_per_iteration"].get<double>();
            per_np = m2["protect_seconds_per_iteration"].get<double>();
        }
        report["c12"] = {{"protect_seconds", wall}, {"peak_rss_kb", rss}, {"per_iteration_ca", per_ca},
                         {"per_iteration_noise_pred", per_np}};
        record(12, "efficiency manifest", ok && wall < 60 && per_np >= per_ca,
               fmt("default protect %.2f s (<60 s), peak RSS %ld kB in manifest; per iteration: noise-pred %.2f ms >= "
                   "cross-attention %.2f ms",
                   wall, rss, 1e3 * per_np, 1e3 * per_ca));
    }

    std::size_t passed = 0;
    for (const auto& v : verdicts) passed += v.pass;
    report["passed"] = passed;
    report["total"] = verdicts.size();
    report["images"] = n_images;
    report["seconds"] = since(t_all);
    std::ofstream(fs::path(work) / "acceptance.json") << report.dump(2) << "\n";
    std::printf("%zu/%zu criteria passed in %.0f s\n", passed, verdicts.size(), since(t_all));
    return passed == verdicts.size() ? 0 : 1;
}
