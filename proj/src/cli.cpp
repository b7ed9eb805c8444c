#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "cgl/harness.hpp"

namespace cgl {

namespace fs = std::filesystem;

namespace {

// Thrown for missing inputs; reported as a usage error.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_exists(const fs::path& p, const std::string& what) {
  if (p.empty() || !fs::exists(p)) throw UsageError(what + " not found: '" + p.string() + "'");
}

struct ConfigArgs {
  std::string config;
  std::vector<std::string> sets;

  void add_to(CLI::App* app) {
    app->add_option("--config", config, "flat key = value config file");
    app->add_option("--set", sets, "override one setting, key=value (repeatable)");
  }

  RunConfig load() const {
    RunConfig c;
    if (!config.empty()) {
      require_exists(config, "config file");
      c = load_config(config);
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      c.set(s.substr(0, eq), s.substr(eq + 1));
    }
    return c;
  }
};

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
}

void print_progress(const std::string& line) { std::cerr << line << std::endl; }

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Concept-grouped CNN training and dissection"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic shapes dataset");
  ConfigArgs gen_cfg;
  gen_cfg.add_to(gen);
  std::optional<std::uint64_t> gen_seed;
  int gen_n = 20000;
  std::string gen_out, gen_labels;
  DatasetConfig data_cfg;
  gen->add_option("--seed", gen_seed, "dataset seed (default: config seed)");
  gen->add_option("--n", gen_n, "number of samples")->check(CLI::PositiveNumber);
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--labels", gen_labels, "binary or multiclass45 (default: config label_mode)");
  gen->add_option("--height", data_cfg.height, "image height");
  gen->add_option("--width", data_cfg.width, "image width");
  gen->add_option("--min-size", data_cfg.min_size, "smallest shape size");
  gen->add_option("--max-size", data_cfg.max_size, "largest shape size");

  // train
  auto* tr = app.add_subcommand("train", "train one model");
  ConfigArgs tr_cfg;
  tr_cfg.add_to(tr);
  std::string tr_out;
  bool tr_quiet = false;
  tr->add_option("--out", tr_out, "run directory (overrides out_dir)");
  tr->add_flag("--quiet", tr_quiet, "no per-epoch progress");

  // dissect
  auto* dis = app.add_subcommand("dissect", "dissect a trained model");
  ConfigArgs dis_cfg;
  dis_cfg.add_to(dis);
  std::string dis_ckpt, dis_data, dis_out, dis_manifest;
  dis->add_option("--checkpoint", dis_ckpt, "checkpoint file")->required();
  dis->add_option("--data", dis_data, "evaluation dataset directory")->required();
  dis->add_option("--out", dis_out, "report JSON path")->required();
  dis->add_option("--manifest", dis_manifest, "top-K manifest JSONL path");

  // table1
  auto* t1 = app.add_subcommand("table1", "train and dissect the three regularizer variants");
  ConfigArgs t1_cfg;
  t1_cfg.add_to(t1);
  std::string t1_out;
  bool t1_quiet = false;
  t1->add_option("--out", t1_out, "experiment directory (overrides out_dir)");
  t1->add_flag("--quiet", t1_quiet, "no per-epoch progress");

  // viz
  auto* viz = app.add_subcommand("viz", "top-K activation regions of one unit");
  ConfigArgs viz_cfg;
  viz_cfg.add_to(viz);
  std::string viz_ckpt, viz_data, viz_unit, viz_out = "viz";
  std::optional<int> viz_k;
  viz->add_option("--checkpoint", viz_ckpt, "checkpoint file")->required();
  viz->add_option("--data", viz_data, "dataset directory (default: config eval_data)");
  viz->add_option("--filter", viz_unit, "unit, e.g. conv2:17")->required();
  viz->add_option("--k", viz_k, "number of images")->check(CLI::PositiveNumber);
  viz->add_option("--out", viz_out, "output directory");

  // report
  auto* rep = app.add_subcommand("report", "summarize a table1 directory or a report JSON");
  std::string rep_in, rep_out;
  rep->add_option("input", rep_in, "table1 directory or report.json")->required();
  rep->add_option("--out", rep_out, "write the summary here as well");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*gen) {
      RunConfig c = gen_cfg.load();
      data_cfg.label_mode = gen_labels.empty() ? c.label_mode : parse_label_mode(gen_labels);
      const auto ds = generate_dataset(gen_n, gen_seed.value_or(c.seed), data_cfg);
      write_dataset(ds, gen_out);
      std::cout << "wrote " << ds.size() << " samples to " << gen_out << "\n";
    } else if (*tr) {
      RunConfig c = tr_cfg.load();
      if (!tr_out.empty()) c.out_dir = tr_out;
      require_exists(c.train_data, "train_data");
      require_exists(c.eval_data, "eval_data");
      const auto result = train(c, tr_quiet ? ProgressFn{} : ProgressFn(print_progress));
      std::cout << "checkpoint " << (c.out_dir / "checkpoint.bin").string() << "  config hash "
                << hash_hex(c.hash()) << "  eval accuracy " << result.metrics.back().eval_accuracy << "\n";
    } else if (*dis) {
      require_exists(dis_ckpt, "checkpoint");
      require_exists(dis_data, "dataset");
      const bool have_config = !dis_cfg.config.empty() || !dis_cfg.sets.empty();
      const RunConfig c = dis_cfg.load();
      c.dissect.validate();
      auto loaded = load_checkpoint(dis_ckpt);
      const auto data = read_dataset(dis_data);
      const auto report = dissect_run(loaded.model, loaded.config_hash, data, c.dissect,
                                      have_config ? std::optional(c.hash()) : std::nullopt);
      write_file(dis_out, to_json(report).dump(2) + "\n");
      if (!dis_manifest.empty()) write_manifest(report, dis_manifest);
      for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
      std::cout << "wrote " << dis_out << "\n";
    } else if (*t1) {
      RunConfig c = t1_cfg.load();
      if (!t1_out.empty()) c.out_dir = t1_out;
      require_exists(c.train_data, "train_data");
      require_exists(c.eval_data, "eval_data");
      const auto variants = run_table1(c, t1_quiet ? ProgressFn{} : ProgressFn(print_progress));
      std::cout << table1_markdown(table1_json(variants));
    } else if (*viz) {
      require_exists(viz_ckpt, "checkpoint");
      RunConfig c = viz_cfg.load();
      const fs::path data_dir = viz_data.empty() ? c.eval_data : fs::path(viz_data);
      require_exists(data_dir, "dataset");
      if (viz_k) c.dissect.top_k = *viz_k;
      const auto [layer, filter] = parse_unit(viz_unit);
      auto loaded = load_checkpoint(viz_ckpt);
      const auto data = read_dataset(data_dir);
      const auto records = visualize_unit(loaded.model, data, layer, filter, c.dissect, viz_out);
      for (const auto& r : records) std::cout << r.dump() << "\n";
    } else if (*rep) {
      require_exists(rep_in, "input");
      const fs::path in = rep_in;
      std::string text;
      if (fs::is_directory(in)) {
        require_exists(in / "table1.json", "table1.json");
        std::ifstream f(in / "table1.json");
        text = table1_markdown(nlohmann::json::parse(f));
      } else {
        std::ifstream f(in);
        const auto r = nlohmann::json::parse(f);
        std::ostringstream md;
        md << "| layer | color | shape | color-shape | total | aligned groups |\n|---|---|---|---|---|---|\n";
        for (const auto& l : r.at("layers")) {
          int aligned = 0;
          for (const auto& g : l.at("groups")) aligned += !g.at("aligned_concept").is_null();
          const auto& u = l.at("unique_detectors");
          md << "| conv" << l.at("layer").get<int>() + 1 << " | " << u.at("color") << " | " << u.at("shape")
             << " | " << u.at("color_shape") << " | " << u.at("total") << " | " << aligned << "/"
             << l.at("groups").size() << " |\n";
        }
        md << "\nRUD: " << r.at("rud").dump() << "\n";
        for (const auto& w : r.at("warnings")) md << "warning: " << w.get<std::string>() << "\n";
        text = md.str();
      }
      std::cout << text;
      if (!rep_out.empty()) write_file(rep_out, text);
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\nRun with --help for usage.\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace cgl
