#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "fedsim/errors.hpp"
#include "fedsim/splitgen.hpp"

using namespace fedsim;

namespace {

LabeledDataset labels_only(int classes, int per_class) {
    LabeledDataset ds;
    ds.num_classes = classes;
    ds.split_tag = "train";
    for (int c = 0; c < classes; ++c)
        for (int i = 0; i < per_class; ++i) {
            ds.samples.push_back(Tensor({2}));
            ds.labels.push_back(c);
        }
    return ds;
}

}  // namespace

TEST_CASE("sample_client_sizes basics") {
    Rng rng(1);
    SUBCASE("single client takes everything") {
        const auto s = sample_client_sizes(1, 100, 1.5, 1, rng);
        CHECK(s == std::vector<std::size_t>{100});
    }
    SUBCASE("exponent zero is uniform") {
        const auto s = sample_client_sizes(4, 400, 0.0, 1, rng);
        CHECK(s == std::vector<std::size_t>{100, 100, 100, 100});
    }
    SUBCASE("sum, minimum and rank monotonicity at scale") {
        const auto s = sample_client_sizes(50, 50000, 1.5, 64, rng);
        CHECK(s.size() == 50);
        CHECK(std::accumulate(s.begin(), s.end(), std::size_t{0}) == 50000);
        for (std::size_t i = 0; i < s.size(); ++i) {
            CHECK(s[i] >= 64);
            if (i > 0) CHECK(s[i - 1] >= s[i]);
        }
    }
    SUBCASE("infeasible minimum is rejected") {
        CHECK_THROWS_AS(sample_client_sizes(10, 50, 1.5, 10, rng), ConfigError);
    }
}

TEST_CASE("dirichlet_partition") {
    SUBCASE("one client owning the full dataset gets every index once") {
        const auto ds = labels_only(5, 20);
        Rng rng(2);
        const auto parts = dirichlet_partition(ds, {100}, 3.0, rng);
        std::set<std::size_t> seen;
        for (const auto& cls : parts[0])
            for (std::size_t i : cls) CHECK(seen.insert(i).second);
        CHECK(seen.size() == 100);
    }

    SUBCASE("huge alpha approaches uniform class proportions") {
        const auto ds = labels_only(10, 1000);
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            Rng rng(seed);
            const auto parts = dirichlet_partition(ds, {2000, 2000}, 1e6, rng);
            for (const auto& client : parts) {
                std::size_t total = 0;
                for (const auto& cls : client) total += cls.size();
                for (const auto& cls : client) {
                    const double prop =
                        static_cast<double>(cls.size()) / static_cast<double>(total);
                    CHECK(prop == doctest::Approx(0.1).epsilon(0.2));  // within 2% absolute
                    CHECK(std::abs(prop - 0.1) < 0.02);
                }
            }
        }
    }

    SUBCASE("alpha=3 CIFAR-100-shaped: non-uniform, exclusive, conserving") {
        const auto ds = labels_only(100, 500);
        Rng size_rng(3);
        const auto sizes = sample_client_sizes(50, ds.size(), 1.5, 64, size_rng);
        Rng rng(3);
        const auto parts = dirichlet_partition(ds, sizes, 3.0, rng);

        std::set<std::size_t> seen;
        bool any_nonuniform = false;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            std::size_t total = 0;
            std::size_t max_class = 0;
            for (const auto& cls : parts[k]) {
                total += cls.size();
                max_class = std::max(max_class, cls.size());
                for (std::size_t i : cls) CHECK(seen.insert(i).second);
            }
            CHECK(total == sizes[k]);
            // a uniform split would put ~1% of the client's mass per class
            if (static_cast<double>(max_class) > 0.03 * static_cast<double>(total))
                any_nonuniform = true;
        }
        CHECK(any_nonuniform);
        CHECK(seen.size() == std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}));
    }

    SUBCASE("over-subscription is a capacity error") {
        const auto ds = labels_only(2, 10);
        Rng rng(4);
        CHECK_THROWS_AS(dirichlet_partition(ds, {15, 10}, 3.0, rng), ConfigError);
    }
}

TEST_CASE("build_task_streams") {
    SUBCASE("single task covers all rounds for every client") {
        const auto streams = build_task_streams(3, 1, 10, 500, 1, 7);
        for (const auto& s : streams) {
            CHECK(s.num_stages() == 1);
            CHECK(s.boundaries == std::vector<std::size_t>{500});
            CHECK(s.tasks[0].size() == 10);
        }
    }

    SUBCASE("permutation and coverage with 10 tasks over 5000 rounds") {
        const auto streams = build_task_streams(2, 10, 10, 5000, 10, 8);
        for (const auto& s : streams) {
            CHECK(s.num_stages() == 10);
            CHECK(s.boundaries.back() == 5000);
            std::size_t prev = 0;
            for (std::size_t b : s.boundaries) {
                CHECK(b > prev);
                CHECK(b - prev >= 10);
                prev = b;
            }
            std::set<int> classes;
            for (const auto& task : s.tasks) {
                CHECK(task.size() == 10);
                for (int c : task) CHECK(classes.insert(c).second);  // each class once
            }
            CHECK(classes.size() == 100);
        }
        CHECK(streams[0].tasks != streams[1].tasks);  // independent orders (1 - 1/10! odds)
    }

    SUBCASE("interval lengths cover the horizon exactly") {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const auto streams = build_task_streams(1, 7, 2, 333, 5, seed);
            std::size_t prev = 0, total = 0;
            for (std::size_t b : streams[0].boundaries) {
                total += b - prev;
                prev = b;
            }
            CHECK(total == 333);
        }
    }

    SUBCASE("infeasible stage length is rejected") {
        CHECK_THROWS_AS(build_task_streams(1, 10, 10, 50, 10, 0), ConfigError);
    }
}

TEST_CASE("active_task boundary semantics") {
    TaskStream s;
    s.tasks = {{0, 1}, {2, 3}};
    s.boundaries = {100, 200};

    CHECK(active_task(s, 1) == std::vector<int>{0, 1});
    CHECK(active_task(s, 100) == std::vector<int>{0, 1});   // (0,100] is stage 0
    CHECK(active_task(s, 101) == std::vector<int>{2, 3});   // (100,200] is stage 1
    CHECK(active_task(s, 200) == std::vector<int>{2, 3});
    CHECK_THROWS_AS(active_task(s, 0), ConfigError);
    CHECK_THROWS_AS(active_task(s, 201), ConfigError);

    SUBCASE("piecewise constant with exactly num_stages-1 interior switches") {
        const auto streams = build_task_streams(1, 6, 3, 700, 4, 11);
        const auto& st = streams[0];
        std::size_t switches = 0;
        for (std::size_t round = 2; round <= 700; ++round)
            if (active_task(st, round) != active_task(st, round - 1)) ++switches;
        CHECK(switches == st.num_stages() - 1);
    }
}

TEST_CASE("generate_split determinism and invariants") {
    const auto ds = labels_only(20, 100);
    SplitConfig cfg;
    cfg.n_clients = 10;
    cfg.num_tasks = 4;
    cfg.classes_per_task = 5;
    cfg.total_rounds = 300;
    cfg.seed = 42;

    const auto a = generate_split(ds, cfg);
    const auto b = generate_split(ds, cfg);
    CHECK(a == b);  // bit-identical given (seed, config)
    validate_split(a, ds.size());

    // conservation against the size sampler
    Rng size_rng(0);
    const auto sizes =
        sample_client_sizes(cfg.n_clients, ds.size(), cfg.powerlaw_exponent, cfg.min_size, size_rng);
    std::size_t want = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
    std::size_t got = 0;
    for (const auto& c : a.clients) got += c.total_samples();
    CHECK(got == want);
}

TEST_CASE("split JSON round-trip is exact") {
    const auto ds = labels_only(20, 100);
    SplitConfig cfg;
    cfg.n_clients = 7;
    cfg.num_tasks = 4;
    cfg.classes_per_task = 5;
    cfg.total_rounds = 120;
    cfg.seed = 9;
    cfg.dirichlet_alpha = 2.7;
    cfg.powerlaw_exponent = 1.3;

    const auto split = generate_split(ds, cfg);
    const auto path = std::filesystem::temp_directory_path() / "fedsim_split_test.json";
    save_split(path.string(), split);
    const auto loaded = load_split(path.string());
    CHECK(split == loaded);
    std::filesystem::remove(path);
}

TEST_CASE("split file with wrong version is rejected") {
    const auto path = std::filesystem::temp_directory_path() / "fedsim_split_bad.json";
    {
        std::ofstream out(path);
        out << R"({"version": 99, "config": {}, "clients": []})";
    }
    CHECK_THROWS_AS(load_split(path.string()), SchemaError);
    std::filesystem::remove(path);
}

TEST_CASE("500-client split round-trips under 2 seconds") {
    const auto ds = labels_only(100, 500);
    SplitConfig cfg;
    cfg.n_clients = 500;
    cfg.num_tasks = 10;
    cfg.classes_per_task = 10;
    cfg.total_rounds = 5000;
    cfg.seed = 1;
    const auto split = generate_split(ds, cfg);

    const auto path = std::filesystem::temp_directory_path() / "fedsim_split_big.json";
    const auto t0 = std::chrono::steady_clock::now();
    save_split(path.string(), split);
    const auto loaded = load_split(path.string());
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(loaded == split);
    CHECK(secs < 2.0);
    std::filesystem::remove(path);
}
