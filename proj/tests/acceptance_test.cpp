// End-to-end acceptance suite. Each test prints one [PASS]/[FAIL] line.
// The expensive artifacts (reference teacher, default distillation run)
// are built once and shared; numeric baselines come from
// tests/fixtures/reference_metrics.json, measured on the committed
// reference run.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include <gtest/gtest.h>
#include <json.hpp>

#include "oracles.hpp"
#include "wadi/experiment.hpp"

using namespace wadi;
namespace fs = std::filesystem;

namespace {

struct Criterion {
    const char* id;
    bool passed = false;
    std::string detail;

    ~Criterion() {
        std::printf("[%s] %s%s%s\n", passed ? "PASS" : "FAIL", id,
                    detail.empty() ? "" : ": ", detail.c_str());
        std::fflush(stdout);
    }
};

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

// Shared heavyweight artifacts, built lazily so the cheap criteria run
// instantly on their own.
class World {
  public:
    static World& get() {
        static World w;
        return w;
    }

    const json& fixture() {
        if (fixture_.is_null()) {
            const fs::path path = fs::path(FIXTURE_DIR) / "reference_metrics.json";
            std::ifstream is(path);
            if (!is) throw std::runtime_error("missing fixture file: " + path.string());
            is >> fixture_;
        }
        return fixture_;
    }

    const fs::path& teacher_path() {
        if (teacher_path_.empty()) {
            TeacherRunConfig config; // committed defaults, seed 1234
            teacher_path_ = run_train_teacher(config, dir() / "teacher");
        }
        return teacher_path_;
    }

    ModelBundle& teacher() {
        if (!teacher_loaded_) {
            teacher_bundle_ = model_from_named(load_checkpoint(teacher_path()));
            teacher_loaded_ = true;
        }
        return teacher_bundle_;
    }

    const ToyDataset& dataset() {
        if (dataset_.size() == 0) dataset_ = teacher().rebuild_dataset();
        return dataset_;
    }

    // fixed evaluation draw shared by the teacher/distill/swap criteria
    const std::vector<int>& eval_labels() {
        if (eval_labels_.empty()) {
            RngPool pool(555);
            RngStream lbl = pool.stream("labels");
            eval_labels_.resize(2048);
            for (auto& l : eval_labels_) l = lbl.uniform_int(0, dataset().n_classes - 1);
        }
        return eval_labels_;
    }

    const Tensor& teacher_samples() {
        if (!teacher_samples_.defined()) {
            RngPool pool(555);
            RngStream rng = pool.stream("sample");
            teacher_samples_ =
                ddim_sample(teacher().model, teacher().schedule, 50, 1.5, eval_labels(), rng);
        }
        return teacher_samples_;
    }

    const Tensor& holdout_points() {
        if (!holdout_.defined())
            holdout_ = ToyDataset::make(dataset().kind, 2048, 99991).points;
        return holdout_;
    }

    const DistillArtifacts& distill_run() {
        if (distill_.merged_checkpoint.empty()) {
            DistillRunConfig config; // committed defaults
            distill_ = run_distill(config, teacher_path(), dir() / "distill");
        }
        return distill_;
    }

    double generator_w2(const fs::path& model_path) {
        ModelBundle bundle = model_from_named(load_checkpoint(model_path));
        StudentGenerator gen{bundle.model.clone_weights(), bundle.schedule,
                             bundle.schedule.steps};
        RngPool pool(777);
        RngStream zr = pool.stream("z");
        Tensor z = Tensor::randn({2, 2048}, zr);
        NoGradGuard ng;
        return exact_w2(gen.generate(z, eval_labels()), teacher_samples());
    }

    const fs::path& dir() {
        if (dir_.empty()) {
            dir_ = fs::temp_directory_path() / "wadi_acceptance";
            fs::remove_all(dir_);
            fs::create_directories(dir_);
        }
        return dir_;
    }

  private:
    fs::path dir_;
    fs::path teacher_path_;
    ModelBundle teacher_bundle_;
    bool teacher_loaded_ = false;
    ToyDataset dataset_;
    std::vector<int> eval_labels_;
    Tensor teacher_samples_;
    Tensor holdout_;
    DistillArtifacts distill_;
    json fixture_;
};

double max_rel_diff(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double denom = std::max(std::abs(b.data()[i]), 1e-300);
        worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]) / denom);
    }
    return worst;
}

std::vector<double> column_norms(const Tensor& w) {
    std::vector<double> norms(w.cols());
    for (std::size_t i = 0; i < w.cols(); ++i) {
        double acc = 0.0;
        for (std::size_t r = 0; r < w.rows(); ++r) acc += w.at(r, i) * w.at(r, i);
        norms[i] = std::sqrt(acc);
    }
    return norms;
}

} // namespace

// ---------------------------------------------------------------------------
// 1. fast rotation == reference rotation
// ---------------------------------------------------------------------------
TEST(Acceptance, C01_RotationOracleEquivalence) {
    Criterion c{"criterion 1 rotation oracle equivalence"};
    RngStream rng(1001);
    double worst = 0.0;
    int draws = 0;
    while (draws < 200) {
        for (std::size_t d : {2u, 4u, 8u, 64u}) {
            for (std::size_t k : {1u, 5u, 33u}) {
                Tensor w = Tensor::randn({d, k}, rng);
                Tensor theta = Tensor::randn({d / 2, k}, rng, 2.5);
                const double rel = max_rel_diff(block_rotation_fast(w, theta),
                                                block_rotation_reference(w, theta));
                worst = std::max(worst, rel);
                ++draws;
            }
        }
    }
    c.detail = "max rel err " + fmt(worst) + " over " + std::to_string(draws) + " draws";
    c.passed = worst < 1e-12;
    EXPECT_TRUE(c.passed) << c.detail;
}

// ---------------------------------------------------------------------------
// 2. norm preservation, including after 1000 optimizer updates
// ---------------------------------------------------------------------------
TEST(Acceptance, C02_NormPreservation) {
    Criterion c{"criterion 2 norm preservation"};
    RngStream rng(1002);
    double worst_col = 0.0, worst_pair = 0.0;

    for (int rep = 0; rep < 50; ++rep) {
        Tensor w = Tensor::randn({16, 8}, rng);
        Tensor theta = Tensor::randn({8, 8}, rng, 3.0);
        Tensor out = block_rotation_fast(w, theta);
        auto before = column_norms(w);
        auto after = column_norms(out);
        for (std::size_t i = 0; i < before.size(); ++i)
            worst_col = std::max(worst_col, std::abs(after[i] - before[i]) / before[i]);
        for (std::size_t i = 0; i < w.cols(); ++i)
            for (std::size_t j = 0; j < w.rows() / 2; ++j) {
                const double b = std::hypot(w.at(2 * j, i), w.at(2 * j + 1, i));
                const double a = std::hypot(out.at(2 * j, i), out.at(2 * j + 1, i));
                if (b > 1e-12) worst_pair = std::max(worst_pair, std::abs(a - b) / b);
            }
    }

    // 1000 optimizer updates of the angle factors
    Tensor base = Tensor::randn({64, 33}, rng);
    RngStream init(1003);
    LoRaDAdapter adapter(base, 8, init);
    AdamW opt(adapter.params(), {.lr = 5e-3});
    RngStream grad_rng(1004);
    for (int step = 0; step < 1000; ++step) {
        Tensor x = Tensor::randn({33, 4}, grad_rng);
        backward(sum(square(adapter.forward(x))));
        opt.step();
        opt.zero_grad();
    }
    auto base_norms = column_norms(base);
    auto merged_norms = column_norms(adapter.merge());
    double worst_opt = 0.0;
    for (std::size_t i = 0; i < base_norms.size(); ++i)
        worst_opt =
            std::max(worst_opt, std::abs(merged_norms[i] - base_norms[i]) / base_norms[i]);

    c.detail = "col " + fmt(worst_col) + ", pair " + fmt(worst_pair) + ", after 1000 updates " +
               fmt(worst_opt);
    c.passed = worst_col < 1e-9 && worst_pair < 1e-9 && worst_opt < 1e-9;
    EXPECT_TRUE(c.passed) << c.detail;
}

// ---------------------------------------------------------------------------
// 3. identity / inverse / additivity / periodicity
// ---------------------------------------------------------------------------
TEST(Acceptance, C03_RotationAlgebra) {
    Criterion c{"criterion 3 rotation algebra"};
    RngStream rng(1005);
    double worst = 0.0;
    bool identity_exact = true;
    for (int trial = 0; trial < 100; ++trial) {
        Tensor w = Tensor::randn({8, 5}, rng);
        Tensor t1 = Tensor::randn({4, 5}, rng);
        Tensor t2 = Tensor::randn({4, 5}, rng);

        // identity: zero angles reproduce the input bit for bit
        Tensor id = block_rotation_fast(w, Tensor::zeros({4, 5}));
        for (std::size_t i = 0; i < w.numel(); ++i)
            identity_exact &= id.data()[i] == w.data()[i];

        Tensor inv = block_rotation_fast(block_rotation_fast(w, t1), scale(t1, -1.0));
        worst = std::max(worst, max_rel_diff(inv, w));

        Tensor seq = block_rotation_fast(block_rotation_fast(w, t1), t2);
        Tensor combined = block_rotation_fast(w, add(t1, t2));
        worst = std::max(worst, max_rel_diff(seq, combined));

        Tensor periodic = block_rotation_fast(w, add(t1, Tensor::full({4, 5}, 2.0 * M_PI)));
        worst = std::max(worst, max_rel_diff(periodic, block_rotation_fast(w, t1)));
    }
    c.detail = "identity exact=" + std::string(identity_exact ? "yes" : "no") +
               ", worst rel err " + fmt(worst);
    c.passed = identity_exact && worst < 1e-10;
    EXPECT_TRUE(c.passed) << c.detail;
}

// ---------------------------------------------------------------------------
// 4. analytic gradients vs finite differences
// ---------------------------------------------------------------------------
TEST(Acceptance, C04_GradientChecks) {
    Criterion c{"criterion 4 gradient checks"};
    RngStream rng(1006);
    double worst = 0.0;
    for (int instance = 0; instance < 20; ++instance) {
        Tensor base = Tensor::randn({8, 6}, rng);
        RngStream init(2000 + instance);
        LoRaDAdapter adapter(base, 2, init);
        adapter.factor_a() = Tensor::randn({4, 2}, init, 0.8, DType::Float64, true);
        adapter.factor_b() = Tensor::randn({2, 6}, init, 0.8, DType::Float64, true);
        Tensor x = Tensor::randn({6, 3}, init);
        Tensor target = Tensor::randn({8, 3}, init);
        auto loss_fn = [&] { return sum(square(sub(adapter.forward(x), target))); };

        for (Tensor param : {adapter.factor_a(), adapter.factor_b()}) {
            adapter.factor_a().clear_grad();
            adapter.factor_b().clear_grad();
            backward(loss_fn());
            auto numeric =
                oracles::finite_difference_grad(param, [&] { return loss_fn().item(); });
            std::vector<double> analytic(param.grad().data().begin(),
                                         param.grad().data().end());
            worst = std::max(worst, oracles::max_rel_error(analytic, numeric));
        }
    }
    c.detail = "max rel err " + fmt(worst) + " over 20 instances";
    c.passed = worst < 1e-5;
    EXPECT_TRUE(c.passed) << c.detail;
}

// ---------------------------------------------------------------------------
// 5. closed-form estimator oracle (1-D linear-Gaussian construction)
// ---------------------------------------------------------------------------
TEST(Acceptance, C05_EstimatorOracle) {
    Criterion c{"criterion 5 estimator closed-form oracle"};
    DiffusionSchedule schedule = DiffusionSchedule::linear(10, 0.02, 0.3);
    RngStream rng(1007);
    double worst = 0.0;
    for (int rep = 0; rep < 10; ++rep) {
        const double p = rng.uniform(0.3, 1.2);
        const double q = rng.uniform(0.3, 1.2);
        const double a0 = rng.uniform(0.5, 2.0);
        const std::size_t batch = 64;
        Tensor z = Tensor::randn({1, batch}, rng);
        Tensor noise = Tensor::randn({1, batch}, rng);
        std::vector<int> labels(batch, 0), ts(batch);
        for (auto& t : ts) t = rng.uniform_int(1, 10);

        Tensor a = Tensor::scalar(a0, DType::Float64, true);
        Tensor loss = vsd_surrogate_loss(
            [&](const Tensor& zz, const std::vector<int>&) { return mul(zz, a); },
            [&](const Tensor& zt, const std::vector<int>&, const std::vector<int>&) {
                return scale(zt, p);
            },
            [&](const Tensor& zt, const std::vector<int>&, const std::vector<int>&) {
                return scale(zt, q);
            },
            schedule, z, labels, ts, noise, OmegaMode::SigmaOverAlpha);
        backward(loss);

        double expect = 0.0;
        for (std::size_t b = 0; b < batch; ++b) {
            const double abar = schedule.abar(ts[b]);
            const double omega = std::sqrt(1.0 - abar) / std::sqrt(abar);
            const double zt = std::sqrt(abar) * a0 * z.data()[b] +
                              std::sqrt(1.0 - abar) * noise.data()[b];
            expect += omega * (p - q) * zt * z.data()[b];
        }
        expect /= static_cast<double>(batch);
        worst = std::max(worst, std::abs(a.grad().item() - expect));
    }
    c.detail = "max abs err " + fmt(worst);
    c.passed = worst < 1e-8;
    EXPECT_TRUE(c.passed) << c.detail;
}

// ---------------------------------------------------------------------------
// 6. teacher quality against the committed fixture
// ---------------------------------------------------------------------------
TEST(Acceptance, C06_TeacherQuality) {
    Criterion c{"criterion 6 teacher quality"};
    World& w = World::get();
    auto hist = mode_histogram(w.teacher_samples(), w.dataset().class_means());
    double min_share = 1.0;
    for (double h : hist) min_share = std::min(min_share, h);
    const double w2 = exact_w2(w.teacher_samples(), w.holdout_points());
    const double bound = w.fixture().at("teacher_w2_holdout").get<double>() * 1.1;

    // the training trace must at least halve: mean of the last 100 steps
    // against the first 100
    std::ifstream is(w.teacher_path().parent_path().parent_path() / "metrics" /
                     "teacher_loss.csv");
    std::string line;
    std::getline(is, line); // header
    std::vector<double> losses;
    while (std::getline(is, line))
        losses.push_back(std::stod(line.substr(line.find(',') + 1)));
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 100; ++i) head += losses[static_cast<std::size_t>(i)];
    for (std::size_t i = losses.size() - 100; i < losses.size(); ++i) tail += losses[i];
    const double loss_ratio = tail / head;

    c.detail = "min mode share " + fmt(min_share) + ", W2(teacher, holdout) " + fmt(w2) +
               " (bound " + fmt(bound) + "), loss ratio " + fmt(loss_ratio);
    c.passed = min_share >= 0.02 && w2 <= bound && loss_ratio < 0.5;
    EXPECT_TRUE(c.passed) << c.detail;
}

// supplementary: a fake model initialized at the teacher scores the
// teacher's own converged training loss on real data
TEST(Acceptance, C06b_FakeAtIdentityMatchesTeacherLoss) {
    Criterion c{"criterion 6b fake-at-identity loss vs teacher fixture"};
    World& w = World::get();
    Denoiser fake = w.teacher().model.clone_weights();
    RngStream init(1008);
    fake.attach_adapters(AdapterKind::LoRaD, 2, init);

    RngPool pool(888);
    RngStream data_rng = pool.stream("data");
    RngStream noise_rng = pool.stream("noise");
    RngStream t_rng = pool.stream("t");
    const ToyDataset& ds = w.dataset();
    const std::size_t n = ds.size();
    double loss_acc = 0.0;
    const int batches = 20;
    for (int rep = 0; rep < batches; ++rep) {
        const std::size_t batch = 128;
        std::vector<double> x0(2 * batch);
        std::vector<int> labels(batch), ts(batch);
        for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t idx =
                static_cast<std::size_t>(data_rng.uniform_int(0, static_cast<int>(n) - 1));
            x0[b] = ds.points.data()[idx];
            x0[batch + b] = ds.points.data()[n + idx];
            labels[b] = ds.labels[idx];
            ts[b] = t_rng.uniform_int(1, w.teacher().schedule.steps);
        }
        Tensor x0_t = Tensor::from_data({2, batch}, std::move(x0));
        Tensor noise = Tensor::randn({2, batch}, noise_rng);
        NoGradGuard ng;
        Tensor loss = fake_denoise_loss(
            [&](const Tensor& z, const std::vector<int>& l, const std::vector<int>& t) {
                return fake.eps(z, l, t);
            },
            w.teacher().schedule, x0_t, labels, ts, noise);
        loss_acc += loss.item();
    }
    const double fake_loss = loss_acc / batches;
    const double fixture_loss = w.fixture().at("teacher_loss_last100").get<double>();
    c.detail = "fake loss " + fmt(fake_loss) + " vs teacher fixture " + fmt(fixture_loss);
    c.passed = std::abs(fake_loss - fixture_loss) <= 0.2 * fixture_loss;
    EXPECT_TRUE(c.passed) << c.detail;
}

// ---------------------------------------------------------------------------
// 7. distillation improves the one-step generator
// ---------------------------------------------------------------------------
TEST(Acceptance, C07_DistillationImprovement) {
    Criterion c{"criterion 7 distillation improvement"};
    World& w = World::get();
    const auto& trace = w.distill_run().trace;
    const double w2_init = trace.front().w2;
    const double w2_final = trace.back().w2;
    const double w2_holdout = exact_w2(w.teacher_samples(), w.holdout_points());
    c.detail = "W2 init " + fmt(w2_init) + " -> final " + fmt(w2_final) + " (reduction " +
               fmt(100.0 * (1.0 - w2_final / w2_init)) + "%), bound " + fmt(1.5 * w2_holdout);
    c.passed = w2_final <= 0.5 * w2_init && w2_final <= 1.5 * w2_holdout;
    EXPECT_TRUE(c.passed) << c.detail;
}

// ---------------------------------------------------------------------------
// 8. ablation table structure
// ---------------------------------------------------------------------------
TEST(Acceptance, C08_AblationTable) {
    Criterion c{"criterion 8 ablation table"};
    World& w = World::get();
    AblateRunConfig config;
    config.base.core.rank_student = 8;
    config.base.core.rank_fake = 2;
    config.base.core.batch = 64;
    config.base.core.steps_override = 250;
    config.base.core.eval_interval = 250;
    config.base.core.eval_samples = 512;
    config.base.core.teacher_sample_steps = 20;
    config.base.core.seed = 4242;
    config.kinds = {"lora", "dora", "dora-frozen-norm", "ft", "lorad"};
    config.ranks = {4, 8, 16};
    auto table = run_ablate(config, w.teacher_path(), w.dir() / "ablate");

    bool ok = table.size() == config.kinds.size() + config.ranks.size();
    std::size_t lorad_params = 0, lora_params = 0;
    double lorad_nm = -1.0, ft_nm = -1.0;
    for (const auto& cell : table) {
        ok &= cell.ok;
        if (cell.label == "lorad") {
            lorad_nm = cell.norm_mean_pct;
            lorad_params = cell.param_count;
        }
        if (cell.label == "lora") lora_params = cell.param_count;
        if (cell.label == "ft") ft_nm = cell.norm_mean_pct;
    }
    ok &= lorad_nm >= 0.0 && lorad_nm < 1e-7;
    ok &= ft_nm > 0.0;
    ok &= lorad_params < lora_params;
    c.detail = std::to_string(table.size()) + " rows, rotation NM " + fmt(lorad_nm) +
               ", full-tune NM " + fmt(ft_nm) + ", params " + std::to_string(lorad_params) +
               " < " + std::to_string(lora_params);
    c.passed = ok;
    EXPECT_TRUE(c.passed) << c.detail;
}

// ---------------------------------------------------------------------------
// 9. norm-swap vs direction-swap ordering
// ---------------------------------------------------------------------------
TEST(Acceptance, C09_SwapOrdering) {
    Criterion c{"criterion 9 swap ordering"};
    World& w = World::get();
    const fs::path norm_hybrid = w.dir() / "hybrid_norm.wadi";
    const fs::path dir_hybrid = w.dir() / "hybrid_dir.wadi";
    // norms from the teacher, directions kept
    run_swap(w.distill_run().merged_checkpoint, w.teacher_path(), norm_hybrid);
    // directions from the teacher, norms kept
    run_swap(w.teacher_path(), w.distill_run().merged_checkpoint, dir_hybrid);

    const double w2_student = w.generator_w2(w.distill_run().merged_checkpoint);
    const double w2_norm = w.generator_w2(norm_hybrid);
    const double w2_dir = w.generator_w2(dir_hybrid);
    const double delta_norm = w2_norm - w2_student;
    const double delta_dir = w2_dir - w2_student;
    c.detail = "student " + fmt(w2_student) + ", norm-swap delta " + fmt(delta_norm) +
               ", direction-swap delta " + fmt(delta_dir);
    c.passed = delta_dir > delta_norm;
    EXPECT_TRUE(c.passed) << c.detail;

    // the norm swap is a near no-op on a rotation-adapted student
    EXPECT_LT(std::abs(delta_norm), 0.1 * w2_student);
}

// ---------------------------------------------------------------------------
// 10. energy-curve properties
// ---------------------------------------------------------------------------
TEST(Acceptance, C10_EnergyCurves) {
    Criterion c{"criterion 10 energy curve properties"};
    RngStream rng(1009);
    bool ok = true;
    for (int rep = 0; rep < 30; ++rep) {
        Tensor a = Tensor::randn({9, 7}, rng);
        Tensor b = Tensor::randn({9, 7}, rng);
        EnergyCurve curve = residual_svd_energy(a, b);
        for (std::size_t i = 1; i < curve.cumulative_energy.size(); ++i)
            ok &= curve.cumulative_energy[i] >= curve.cumulative_energy[i - 1] - 1e-15;
        ok &= curve.cumulative_energy.back() == 1.0;
    }

    // geometric spectrum: five outer products with sigma_i = 2^-i
    const std::size_t d = 12, k = 10;
    std::vector<double> data(d * k, 0.0);
    for (int term = 0; term < 5; ++term) {
        std::vector<double> u(d), v(k);
        double nu = 0.0, nv = 0.0;
        for (auto& x : u) {
            x = rng.normal();
            nu += x * x;
        }
        for (auto& x : v) {
            x = rng.normal();
            nv += x * x;
        }
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < k; ++j)
                data[i * k + j] += std::pow(2.0, -term) * (u[i] / std::sqrt(nu)) *
                                   (v[j] / std::sqrt(nv));
    }
    for (auto& x : data) x += 1e-9 * rng.normal();
    EnergyCurve curve =
        residual_svd_energy(Tensor::from_data({d, k}, data), Tensor::zeros({d, k}));
    const double e5 = curve.cumulative_energy[4];
    ok &= e5 >= 0.99;
    c.detail = "monotone+terminal ok, geometric e(5) " + fmt(e5);
    c.passed = ok;
    EXPECT_TRUE(c.passed) << c.detail;
}

// ---------------------------------------------------------------------------
// 11. persistence round trips for every model type
// ---------------------------------------------------------------------------
TEST(Acceptance, C11_Persistence) {
    Criterion c{"criterion 11 checkpoint persistence"};
    World& w = World::get();
    bool ok = true;

    auto roundtrip_bitexact = [&](const NamedTensors& tensors, const std::string& tag) {
        const fs::path p1 = w.dir() / (tag + "_1.wadi");
        const fs::path p2 = w.dir() / (tag + "_2.wadi");
        save_checkpoint(p1, tensors);
        NamedTensors loaded = load_checkpoint(p1);
        save_checkpoint(p2, loaded);
        std::ifstream a(p1, std::ios::binary), b(p2, std::ios::binary);
        std::vector<char> ba{std::istreambuf_iterator<char>(a), {}};
        std::vector<char> bb{std::istreambuf_iterator<char>(b), {}};
        const bool same = ba == bb;
        ok &= same;
        for (const auto& [name, t] : tensors.items()) {
            const Tensor& l = loaded.get(name);
            ok &= l.dtype() == t.dtype() && l.shape() == t.shape();
            for (std::size_t i = 0; i < t.numel(); ++i) ok &= l.data()[i] == t.data()[i];
        }
    };

    auto as_dtype = [](const NamedTensors& in, DType dtype) {
        NamedTensors out;
        for (const auto& [name, t] : in.items()) out.add(name, t.astype(dtype));
        return out;
    };

    // teacher model and merged student, both dtypes
    NamedTensors teacher_named = load_checkpoint(w.teacher_path());
    roundtrip_bitexact(teacher_named, "teacher_f64");
    roundtrip_bitexact(as_dtype(teacher_named, DType::Float32), "teacher_f32");
    NamedTensors student_named = load_checkpoint(w.distill_run().merged_checkpoint);
    roundtrip_bitexact(student_named, "student_f64");
    roundtrip_bitexact(as_dtype(student_named, DType::Float32), "student_f32");

    // adapter factor files for every adapter kind
    RngStream rng(1010);
    Tensor base = Tensor::randn({8, 6}, rng);
    for (AdapterKind kind : {AdapterKind::LoRaD, AdapterKind::LoRA, AdapterKind::DoRA,
                             AdapterKind::DoRAFrozenNorm, AdapterKind::FullTune}) {
        RngStream init(1011);
        auto adapter = make_adapter(kind, base, 2, init);
        NamedTensors named;
        for (auto& [suffix, t] : adapter->named_params()) named.add("layer." + suffix, t);
        roundtrip_bitexact(named, std::string("adapter_") + adapter_kind_name(kind) + "_f64");
        roundtrip_bitexact(as_dtype(named, DType::Float32),
                           std::string("adapter_") + adapter_kind_name(kind) + "_f32");
    }

    c.detail = "teacher, merged student and all adapter kinds, float32 + float64";
    c.passed = ok;
    EXPECT_TRUE(c.passed) << c.detail;
}
