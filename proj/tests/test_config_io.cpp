#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "fixtures.hpp"
#include "robwe/experiments.hpp"
#include "robwe/io.hpp"

using namespace robwe;

namespace {

RunConfig parse(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is, {}, "test.cfg");
}

std::string config_error(const std::string& text) {
  try {
    parse(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

bool same_bits(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

}  // namespace

TEST(Config, ParsesKeysCommentsAndLists) {
  const auto cfg = parse("# header\nclients = 12\n\nsample_rate=0.25  # trailing\nrep_hidden = 16, 8\n"
                         "detector = false\npartition = klabels\nseed = 18446744073709551615\n");
  EXPECT_EQ(cfg.clients, 12u);
  EXPECT_EQ(cfg.sample_rate, 0.25);
  EXPECT_EQ(cfg.rep_hidden, (std::vector<std::size_t>{16, 8}));
  EXPECT_FALSE(cfg.detector);
  EXPECT_EQ(cfg.partition, "klabels");
  EXPECT_EQ(cfg.seed, 18446744073709551615ull);
  EXPECT_EQ(cfg.rounds, RunConfig{}.rounds);
}

TEST(Config, DefaultsMatchDeskScale) {
  const RunConfig cfg;
  EXPECT_EQ(cfg.clients, 20u);
  EXPECT_EQ(cfg.rounds, 30u);
  EXPECT_EQ(cfg.head_epochs, 10u);
  EXPECT_EQ(cfg.rep_epochs, 1u);
  EXPECT_EQ(cfg.learning_rate, 0.01);
  EXPECT_EQ(cfg.batch_size, 10u);
  EXPECT_EQ(cfg.private_bits, 100u);
  EXPECT_EQ(cfg.slice_bits, 32u);
  EXPECT_EQ(cfg.c_n, 0.975);
  EXPECT_EQ(cfg.c_m, 0.5);
  EXPECT_EQ(cfg.beta, 5u);
  EXPECT_EQ(cfg.min_cohort, 3u);
  EXPECT_NO_THROW(cfg.validate());
}

TEST(Config, ErrorsNameTheLine) {
  EXPECT_NE(config_error("clients = 3\nbogus = 1\n").find("test.cfg:2: unknown key 'bogus'"), std::string::npos);
  EXPECT_NE(config_error("\n\nrounds\n").find("test.cfg:3"), std::string::npos);
  EXPECT_NE(config_error("rounds = ten\n").find("test.cfg:1"), std::string::npos);
  EXPECT_NE(config_error("sample_rate = 0.5x\n").find("test.cfg:1"), std::string::npos);
  EXPECT_NE(config_error("detector = maybe\n").find("test.cfg:1"), std::string::npos);
  EXPECT_NE(config_error("rounds = -3\n").find("test.cfg:1"), std::string::npos);
}

TEST(Config, ValidationRejectsBadRanges) {
  auto bad = [](auto mutate) {
    RunConfig cfg;
    mutate(cfg);
    EXPECT_THROW(cfg.validate(), ConfigError);
  };
  bad([](RunConfig& c) { c.sample_rate = 0.0; });
  bad([](RunConfig& c) { c.sample_rate = 0.01; });
  bad([](RunConfig& c) { c.batch_size = 0; });
  bad([](RunConfig& c) { c.rep_hidden.clear(); });
  bad([](RunConfig& c) { c.dataset = "cifar"; });
  bad([](RunConfig& c) { c.dataset = "idx"; });
  bad([](RunConfig& c) { c.partition = "iid"; });
  bad([](RunConfig& c) { c.malicious_fraction = 1.5; });
  bad([](RunConfig& c) { c.tamper_mode = "sometimes"; });
  bad([](RunConfig& c) { c.c_n = 1.0; });
  bad([](RunConfig& c) { c.slice_total_bits = 5; });
}

TEST(Config, OverridesAndTextRoundTrip) {
  auto cfg = fixture::tiny_config();
  set_config_value(cfg, "tamper_rate", "0.3");
  set_config_value(cfg, "head_hidden", "");
  EXPECT_EQ(cfg.tamper_rate, 0.3);
  EXPECT_TRUE(cfg.head_hidden.empty());
  EXPECT_THROW(set_config_value(cfg, "nope", "1"), ConfigError);
  EXPECT_TRUE(is_config_key("slice_alpha"));
  EXPECT_FALSE(is_config_key("nope"));
  const auto text = to_text(cfg);
  EXPECT_EQ(to_text(parse(text)), text);
  EXPECT_EQ(get_config_value(parse(text), "learning_rate"), get_config_value(cfg, "learning_rate"));
}

TEST(Config, OutputRootFromEnvironment) {
  RunConfig cfg;
  cfg.output_dir = "runs/x";
  ::setenv("ROBWE_OUTPUT_ROOT", "/tmp/root", 1);
  EXPECT_EQ(resolve_output_dir(cfg), std::filesystem::path("/tmp/root/runs/x"));
  cfg.output_dir = "/abs/y";
  EXPECT_EQ(resolve_output_dir(cfg), std::filesystem::path("/abs/y"));
  ::unsetenv("ROBWE_OUTPUT_ROOT");
  cfg.output_dir = "runs/x";
  EXPECT_EQ(resolve_output_dir(cfg), std::filesystem::path("runs/x"));
}

TEST(Config, MissingFile) { EXPECT_THROW(load_config("/nonexistent/robwe.cfg"), ConfigError); }

TEST(Csv, NumberFormatting) {
  EXPECT_EQ(io::fmt(0.1), "0.1");
  EXPECT_EQ(io::fmt(1.0), "1");
  EXPECT_EQ(io::fmt(std::nan("")), "");
  EXPECT_EQ(io::fmt(std::optional<double>{}), "");
  for (double v : {0.1 + 0.2, 1.0 / 3.0, 1e-300, -2.5e17}) EXPECT_EQ(io::parse_real(io::fmt(v)), v);
  EXPECT_THROW(io::parse_real("1.0x"), std::invalid_argument);
}

TEST(Csv, RunArtifactsRoundTrip) {
  auto cfg = fixture::tiny_config();
  cfg.sample_rate = 0.75;
  cfg.malicious_fraction = 0.25;
  Simulation sim(cfg);
  sim.run();

  std::stringstream rounds;
  io::write_rounds_csv(rounds, sim.reports());
  const auto rows = io::read_rounds_csv(rounds);
  const auto expect_rows = io::round_rows(sim.reports());
  ASSERT_EQ(rows.size(), expect_rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].round, expect_rows[i].round);
    EXPECT_EQ(rows[i].client, expect_rows[i].client);
    EXPECT_EQ(rows[i].embedding_count, expect_rows[i].embedding_count);
    EXPECT_EQ(rows[i].accepted, expect_rows[i].accepted);
    EXPECT_TRUE(same_bits(rows[i].slice_acc, expect_rows[i].slice_acc));
    EXPECT_TRUE(same_bits(rows[i].main_acc, expect_rows[i].main_acc));
  }

  std::stringstream finals;
  const auto f = final_metrics(sim);
  io::write_final_metrics_csv(finals, f);
  const auto f2 = io::read_final_metrics_csv(finals);
  ASSERT_EQ(f2.size(), f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    EXPECT_EQ(f2[i].client, f[i].client);
    EXPECT_EQ(f2[i].malicious, f[i].malicious);
    EXPECT_TRUE(same_bits(f2[i].main_acc, f[i].main_acc));
    EXPECT_TRUE(same_bits(f2[i].private_acc, f[i].private_acc));
    EXPECT_TRUE(same_bits(f2[i].slice_acc, f[i].slice_acc));
  }

  std::stringstream ledger;
  detection::write_ledger_csv(ledger, sim.server().detector.ledger());
  const auto verdicts = io::read_ledger_csv(ledger);
  const auto history = sim.server().detector.ledger().history();
  ASSERT_EQ(verdicts.size(), history.size());
  for (std::size_t i = 0; i < verdicts.size(); ++i) {
    EXPECT_EQ(verdicts[i].record.acc, history[i].record.acc);
    EXPECT_EQ(verdicts[i].record.client_id, history[i].record.client_id);
    EXPECT_EQ(verdicts[i].decision, history[i].decision);
    EXPECT_EQ(verdicts[i].rule, history[i].rule);
  }

  std::stringstream keys;
  io::write_keys_csv(keys, sim.clients());
  const auto records = io::read_keys_csv(keys);
  ASSERT_EQ(records.size(), cfg.clients);
  for (const auto& k : records) {
    const auto rebuilt = io::rebuild_key(k, sim.layout().specs);
    const auto& orig = *sim.clients()[k.client].watermark;
    EXPECT_EQ(rebuilt.bits, orig.bits);
    ASSERT_EQ(rebuilt.segments.size(), orig.segments.size());
    for (std::size_t s = 0; s < orig.segments.size(); ++s)
      EXPECT_EQ(rebuilt.segments[s].matrix.entries, orig.segments[s].matrix.entries);
  }

  std::stringstream models;
  const auto ms = personalized_models(sim);
  io::write_models_json(models, ms);
  EXPECT_EQ(io::read_models_json(models), ms);
}

TEST(Csv, HeatmapFromRunDirectoryMatchesInMemory) {
  TempDir dir("robwe_io_run");
  const auto cfg = fixture::tiny_config();
  Simulation sim(cfg);
  sim.run();
  io::write_run(dir.path, sim);
  for (const char* f : {"config.txt", "rounds.csv", "final_metrics.csv", "keys.csv", "slices.csv", "ledger.csv",
                        "models.json"})
    EXPECT_TRUE(std::filesystem::exists(dir.path / f)) << f;
  const auto ms = personalized_models(sim);
  const auto keys = private_keys(sim);
  const auto expected = watermark_heatmap(ms, keys);
  EXPECT_EQ(io::heatmap_from_run(dir.path), expected);
  std::stringstream ss;
  io::write_heatmap_csv(ss, expected);
  EXPECT_EQ(io::read_heatmap_csv(ss), expected);
  auto cs = io::open_in(dir.path / "config.txt");
  EXPECT_EQ(to_text(parse_config(cs)), to_text(cfg));
}

TEST(Csv, FidelityAndAttackTables) {
  const std::vector<FidelityRow> fid{{0, 0.8}, {50, 0.79}, {100, 0.78}};
  std::stringstream fs;
  io::write_fidelity_csv(fs, fid);
  EXPECT_NE(fs.str().find("100,0.78,2.5"), std::string::npos) << fs.str();
  const auto fid2 = io::read_fidelity_csv(fs);
  ASSERT_EQ(fid2.size(), 3u);
  EXPECT_EQ(fid2[1].main_acc, 0.79);
  EXPECT_EQ(sweep_gap(fid2), fidelity_gap(0.8, 0.78));

  std::vector<io::AttackRow> rows{{"Dir(0.5)", 0.2, 0.1, {100.0, 62.5, 1.0, 0.0, 37.5}},
                                  {"K(2)", 0.4, 0.3, {97.0, std::nullopt, 0.75, 0.05, std::nullopt}}};
  std::stringstream as;
  io::write_attack_csv(as, rows);
  const auto back = io::read_attack_csv(as);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].noniid, "Dir(0.5)");
  EXPECT_EQ(back[0].report.delta, 37.5);
  EXPECT_FALSE(back[1].report.w_m);
  EXPECT_EQ(back[1].report.d_f, 0.05);
}

TEST(Csv, NonIidLabels) {
  RunConfig cfg;
  EXPECT_EQ(io::noniid_label(cfg), "Dir(0.5)");
  cfg.partition = "klabels";
  cfg.k_labels = 3;
  EXPECT_EQ(io::noniid_label(cfg), "K(3)");
}

TEST(Csv, MalformedInputNamesTheLine) {
  std::stringstream wrong_header("round,client\n");
  EXPECT_THROW(io::read_rounds_csv(wrong_header), io::CsvError);
  std::stringstream short_row(std::string(io::rounds_header) + "\n1,0,1,1,1,0.5\n2,0,2\n");
  try {
    io::read_rounds_csv(short_row);
    FAIL();
  } catch (const io::CsvError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  std::stringstream bad_json("{\"models\": 3}");
  EXPECT_THROW(io::read_models_json(bad_json), io::CsvError);
}

TEST(Fidelity, GapArithmetic) {
  EXPECT_EQ(fidelity_gap(0.9, 0.9), 0.0);
  EXPECT_NEAR(fidelity_gap(0.8, 0.78), 2.5, 1e-12);
  EXPECT_THROW(fidelity_gap(0.0, 0.5), std::invalid_argument);
}
