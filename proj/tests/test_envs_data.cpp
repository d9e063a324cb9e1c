#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "common.hpp"

using namespace arq;
using arq::testing::bytes;
using arq::testing::TempDir;

namespace {

double density(const ToyEnv& env, double s, double a) {
    return std::exp(env.behavior_log_density(detail::vec1(s), detail::vec1(a)));
}

// Midpoint rule on [-1, 1].
double integral(const ToyEnv& env, double s, int n) {
    double sum = 0;
    for (int i = 0; i < n; ++i) sum += density(env, s, -1.0 + (i + 0.5) * 2.0 / n);
    return sum * 2.0 / n;
}

std::string read_text(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::filesystem::path& p, const std::string& s) {
    std::ofstream(p) << s;
}

}  // namespace

TEST(LineWorld, BehaviorSamplesSitInTheTwoModes) {
    LineWorld env;
    Rng rng(1);
    int neg = 0;
    for (int i = 0; i < 5000; ++i) {
        const double a = env.sample_behavior(detail::vec1(0.5), rng)[0];
        EXPECT_TRUE((a >= -0.6 && a <= -0.4) || (a >= 0.4 && a <= 0.6)) << a;
        neg += a < 0;
    }
    EXPECT_GT(neg, 0);
    EXPECT_LT(neg, 5000);
}

TEST(LineWorld, DensityIntegratesToOneAndVanishesBetweenModes) {
    LineWorld env;
    for (double s : {-1.0, -0.3, 0.0, 0.5, 1.0}) {
        // Trapezoid over 1e4 points.
        const int n = 10000;
        double sum = 0;
        for (int i = 0; i < n; ++i) {
            const double a = -1.0 + 2.0 * i / (n - 1);
            sum += (i == 0 || i == n - 1 ? 0.5 : 1.0) * density(env, s, a);
        }
        EXPECT_NEAR(sum * 2.0 / (n - 1), 1.0, 1e-4) << "s " << s;
        EXPECT_EQ(density(env, s, 0.0), 0.0);
    }
}

TEST(LineWorld, SampleHistogramMatchesDensity) {
    LineWorld env;
    Rng rng(2);
    const int n = 20000, bins = 20;
    std::vector<int> h(bins);
    for (int i = 0; i < n; ++i) {
        const double a = env.sample_behavior(detail::vec1(0.0), rng)[0];
        ++h[static_cast<std::size_t>(std::clamp(static_cast<int>((a + 1.0) / 2.0 * bins), 0, bins - 1))];
    }
    for (int b = 0; b < bins; ++b) {
        double p = 0;
        for (int k = 0; k < 100; ++k) p += density(env, 0.0, -1.0 + (b + (k + 0.5) / 100) * 2.0 / bins) * 2.0 / bins / 100;
        EXPECT_NEAR(h[static_cast<std::size_t>(b)], n * p, 5 * std::sqrt(n * p + 1)) << "bin " << b;
    }
}

TEST(Envs, DensitiesIntegrateToOne) {
    EXPECT_NEAR(integral(CliffBandit(), 0.0, 1000000), 1.0, 1e-4);
    StitchGrid sg;
    EXPECT_NEAR(integral(sg, 0.0, 1000000), 1.0, 1e-4);
}

TEST(Envs, CliffRewardAndOptimum) {
    EXPECT_EQ(CliffBandit::reward(0.2), 0.96);
    EXPECT_EQ(CliffBandit::reward(0.81), -10.0);
    CliffBandit env;
    EXPECT_EQ(env.descriptor().optimal_return, 0.96);
    EXPECT_EQ(density(env, 0.0, 0.1), 0.0);
}

TEST(Envs, UnknownNameRejected) {
    EXPECT_THROW(make_env("mountaincar"), ContractViolation);
    for (const std::string n : {"lineworld", "cliffbandit", "stitchgrid"}) EXPECT_EQ(make_env(n)->descriptor().name, n);
}

TEST(Dataset, ZeroTransitionsRejected) {
    EXPECT_THROW(generate_dataset(LineWorld(), 0, 1), ContractViolation);
}

TEST(Dataset, SizesAndBounds) {
    for (const std::string n : {"lineworld", "cliffbandit", "stitchgrid"}) {
        const auto env = make_env(n);
        const auto d = generate_dataset(*env, 137, 3);
        EXPECT_EQ(d.size(), 137u);
        const Matrix a = d.normalized_actions();
        EXPECT_LE(a.cwiseAbs().maxCoeff(), 1.0 + 1e-12);
        for (const auto& t : d.transitions) {
            EXPECT_EQ(static_cast<std::size_t>(t.s.size()), env->descriptor().state_dim);
            EXPECT_GT(env->behavior_log_density(t.s, t.a), -std::numeric_limits<double>::infinity());
        }
    }
}

TEST(Dataset, StitchGridHasNoStartToGoalTrajectory) {
    StitchGrid env;
    const auto d = generate_dataset(env, 2000, 4);
    int origin = -1, goals = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto& t = d.transitions[i];
        const bool fresh = i == 0 || d.transitions[i - 1].done || d.transitions[i - 1].s2 != t.s;
        if (fresh) origin = StitchGrid::index_of(t.s);
        if (t.goal) {
            ++goals;
            EXPECT_NE(origin, 0) << "row " << i;
        }
        if (origin == 0) {
            EXPECT_LE(StitchGrid::index_of(t.s2), StitchGrid::kMid) << "row " << i;
        }
    }
    EXPECT_GT(goals, 0);
}

TEST(Dataset, SameSeedSameBytes) {
    TempDir dir("data_seed");
    save_dataset(dir / "a.jsonl", generate_dataset(LineWorld(), 300, 5));
    save_dataset(dir / "b.jsonl", generate_dataset(LineWorld(), 300, 5));
    save_dataset(dir / "c.jsonl", generate_dataset(LineWorld(), 300, 6));
    EXPECT_EQ(bytes(dir / "a.jsonl"), bytes(dir / "b.jsonl"));
    EXPECT_NE(bytes(dir / "a.jsonl"), bytes(dir / "c.jsonl"));
}

TEST(Dataset, SaveLoadSaveIsIdentity) {
    TempDir dir("data_rt");
    for (const std::string n : {"lineworld", "cliffbandit", "stitchgrid"}) {
        const auto d = generate_dataset(*make_env(n), 200, 7);
        save_dataset(dir / "a.jsonl", d);
        const auto back = load_dataset(dir / "a.jsonl");
        save_dataset(dir / "b.jsonl", back);
        EXPECT_EQ(bytes(dir / "a.jsonl"), bytes(dir / "b.jsonl")) << n;
        EXPECT_EQ(back.header.env, n);
        EXPECT_EQ(back.transitions[17].r, d.transitions[17].r);
        EXPECT_EQ(back.transitions[17].a, d.transitions[17].a);
    }
}

TEST(Dataset, TruncatedFileNamesTheLine) {
    TempDir dir("data_trunc");
    save_dataset(dir / "a.jsonl", generate_dataset(CliffBandit(), 10, 8));
    std::string text = read_text(dir / "a.jsonl");
    text.resize(text.size() - 20);
    write_text(dir / "b.jsonl", text);
    try {
        load_dataset(dir / "b.jsonl");
        FAIL() << "truncated file accepted";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 11u) << e.what();
    }
    // Whole rows missing: the declared count no longer matches.
    text = read_text(dir / "a.jsonl");
    text.resize(text.rfind('\n', text.size() - 2) + 1);
    write_text(dir / "c.jsonl", text);
    EXPECT_THROW(load_dataset(dir / "c.jsonl"), ParseError);
}

TEST(Dataset, HeaderDimsMismatchNamesTheRow) {
    TempDir dir("data_dims");
    save_dataset(dir / "a.jsonl", generate_dataset(LineWorld(), 5, 9));
    std::string text = read_text(dir / "a.jsonl");
    const auto at = text.find("\"state_dim\":1");
    ASSERT_NE(at, std::string::npos);
    text.replace(at, 13, "\"state_dim\":2");
    write_text(dir / "b.jsonl", text);
    try {
        load_dataset(dir / "b.jsonl");
        FAIL() << "dimension mismatch accepted";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 2u);
        EXPECT_NE(std::string(e.what()).find("row 0"), std::string::npos) << e.what();
    }
}

TEST(Dataset, OutOfBoundsActionAndMissingFileRejected) {
    TempDir dir("data_bad");
    auto d = generate_dataset(CliffBandit(), 3, 10);
    d.transitions[1].a[0] = 5.0;
    save_dataset(dir / "a.jsonl", d);
    EXPECT_THROW(load_dataset(dir / "a.jsonl"), ParseError);
    EXPECT_THROW(load_dataset(dir / "missing.jsonl"), ParseError);
}

TEST(Normalizer, RoundTripAndDegenerateWidth) {
    ActionNormalizer n{Vector::Constant(1, -2.0), Vector::Constant(1, 6.0)};
    EXPECT_DOUBLE_EQ(n.normalize(detail::vec1(-2.0))[0], -1.0);
    EXPECT_DOUBLE_EQ(n.normalize(detail::vec1(6.0))[0], 1.0);
    EXPECT_DOUBLE_EQ(n.denormalize(n.normalize(detail::vec1(1.3)))[0], 1.3);
    ActionNormalizer flat{Vector::Constant(1, 0.5), Vector::Constant(1, 0.5)};
    EXPECT_TRUE(std::isfinite(flat.normalize(detail::vec1(0.5))[0]));
}

TEST(Density, SingleCellCsvHasOneRow) {
    Rng rng(11);
    const auto model = ScoreModel::create(1, 1, ScoreNetConfig{16, 1}, SdeConfig{}, rng);
    const auto g = density_grid(model, linspace(-1, 1, 1), linspace(-1, 1, 1), std::exp(-5.0));
    EXPECT_EQ(g.s[0], 0.0);
    const auto csv = density_csv(g);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
    EXPECT_EQ(csv.substr(0, 9), "s,a,logp\n");
    EXPECT_TRUE(std::isfinite(g.logp(0, 0)));
    EXPECT_EQ(g.failures, 0u);
}

TEST(Density, GridShapeAndContracts) {
    Rng rng(12);
    const auto model = ScoreModel::create(1, 1, ScoreNetConfig{16, 1}, SdeConfig{}, rng);
    const auto g = density_grid(model, linspace(-1, 1, 3), linspace(-0.5, 0.5, 4), std::exp(-5.0));
    EXPECT_EQ(g.logp.rows(), 3);
    EXPECT_EQ(g.logp.cols(), 4);
    EXPECT_THROW(density_grid(model, linspace(-1, 1, 3), linspace(-2, 2, 3), 0.1), ContractViolation);
    EXPECT_THROW(density_grid(model, linspace(-1, 1, 3), linspace(-1, 1, 3), 0.0), ContractViolation);
    const auto wide = ScoreModel::create(2, 1, ScoreNetConfig{16, 1}, SdeConfig{}, rng);
    EXPECT_THROW(density_grid(wide, linspace(-1, 1, 3), linspace(-1, 1, 3), 0.1), ContractViolation);
}

TEST(Density, ConstantGridGivesUniformImage) {
    DensityGrid g;
    g.s = linspace(-1, 1, 4);
    g.a = linspace(-1, 1, 3);
    g.logp = Matrix::Constant(4, 3, -1.5);
    g.floor = -10.0;
    const auto pgm = density_pgm(g);
    const std::string header = "P5\n4 3\n255\n";
    ASSERT_EQ(pgm.size(), header.size() + 12);
    EXPECT_EQ(pgm.substr(0, header.size()), header);
    for (std::size_t i = header.size(); i < pgm.size(); ++i) EXPECT_EQ(static_cast<unsigned char>(pgm[i]), 255);
}

TEST(Density, ImageOrientation) {
    DensityGrid g;
    g.s = linspace(-1, 1, 2);
    g.a = linspace(-1, 1, 2);
    g.logp.resize(2, 2);
    g.logp << 0, -10,  // s = -1: high at a = -1
        -10, -10;
    g.floor = -10;
    const auto pgm = density_pgm(g);
    const std::string px = pgm.substr(pgm.size() - 4);
    // Rows run from a = +1 down to a = -1, columns from s = -1 up.
    EXPECT_EQ(static_cast<unsigned char>(px[0]), 0);
    EXPECT_EQ(static_cast<unsigned char>(px[2]), 255);
}

TEST(Config, DefaultsRoundTrip) {
    RunConfig c;
    c.seed = 42;
    c.env = "stitchgrid";
    c.q.k = 3;
    const auto back = run_config_from_json(json::parse(to_json(c).dump()));
    EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
    EXPECT_EQ(back.q.seed, 42u);
    EXPECT_EQ(back.score.seed, 42u);
}

TEST(Config, UnknownKeysRejected) {
    EXPECT_THROW(run_config_from_json(json::parse(R"({"seeed": 1})")), ParseError);
    EXPECT_THROW(run_config_from_json(json::parse(R"({"score": {"stepz": 1}})")), ParseError);
    try {
        run_config_from_json(json::parse(R"({"q": {"gama": 0.9}})"));
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("q.gama"), std::string::npos) << e.what();
    }
}

TEST(Config, SeedOverrideFromEnvironment) {
    TempDir dir("cfg");
    write_text(dir / "c.json", R"({"seed": 5, "env": "cliffbandit"})");
    ::unsetenv("ARQ_SEED");
    EXPECT_EQ(load_run_config((dir / "c.json").string()).seed, 5u);
    ::setenv("ARQ_SEED", "77", 1);
    const auto c = load_run_config((dir / "c.json").string());
    EXPECT_EQ(c.seed, 77u);
    EXPECT_EQ(c.q.seed, 77u);
    EXPECT_EQ(c.env, "cliffbandit");
    ::setenv("ARQ_SEED", "x1", 1);
    EXPECT_THROW(load_run_config(""), ContractViolation);
    ::unsetenv("ARQ_SEED");
    write_text(dir / "bad.json", "{");
    EXPECT_THROW(load_run_config((dir / "bad.json").string()), ParseError);
}
