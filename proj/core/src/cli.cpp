#include "mome/cli.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "json.hpp"
#include "mome/pca.hpp"
#include "mome/serialize.hpp"

namespace mome::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void print_error(const std::string& kind, const std::string& message) {
  json err;
  err["error"] = {{"kind", kind}, {"message", message}};
  std::cerr << err.dump() << "\n";
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// RFC-4180 writer: CRLF records, header row, quoting only when needed.
class CsvWriter {
 public:
  explicit CsvWriter(const fs::path& path) : os_(path, std::ios::binary) {
    if (!os_) throw ConfigError("cannot write " + path.string());
  }
  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) os_ << ',';
      os_ << escape(fields[i]);
    }
    os_ << "\r\n";
  }

 private:
  static std::string escape(const std::string& f) {
    if (f.find_first_of(",\"\r\n") == std::string::npos) return f;
    std::string out = "\"";
    for (char c : f) {
      if (c == '"') out += '"';
      out += c;
    }
    out += '"';
    return out;
  }
  std::ofstream os_;
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c == '\r') {
      // swallow
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

struct RunWriter {
  fs::path dir;
  std::ofstream routing;
  std::ofstream importance;

  explicit RunWriter(const fs::path& d) : dir(d) {
    fs::create_directories(dir);
    routing.open(dir / "routing.jsonl", std::ios::binary);
    importance.open(dir / "importance.jsonl", std::ios::binary);
    if (!routing || !importance) {
      throw ConfigError("cannot open stats sink in " + dir.string());
    }
  }

  RoutingSinks sinks() {
    RoutingSinks s;
    s.mole = [this](int step, int task, int layer, int expert,
                    std::span<const double> logits) {
      json rec;
      rec["step"] = step;
      rec["task"] = task;
      rec["layer"] = layer;
      rec["expert"] = expert;
      rec["logits"] = std::vector<double>(logits.begin(), logits.end());
      routing << rec.dump() << "\n";
    };
    s.move = [this](int step, int task, std::span<const double> weights,
                    std::span<const double> imp) {
      // The vision router shares the routing schema under layer -1; the soft
      // weights and importances stream separately.
      json rec;
      rec["step"] = step;
      rec["task"] = task;
      rec["weights"] = std::vector<double>(weights.begin(), weights.end());
      rec["importance"] = std::vector<double>(imp.begin(), imp.end());
      importance << rec.dump() << "\n";
      int best = 0;
      for (std::size_t e = 1; e < weights.size(); ++e) {
        if (weights[e] > weights[static_cast<std::size_t>(best)])
          best = static_cast<int>(e);
      }
      json sel;
      sel["step"] = step;
      sel["task"] = task;
      sel["layer"] = -1;
      sel["expert"] = best;
      sel["logits"] = std::vector<double>(weights.begin(), weights.end());
      routing << sel.dump() << "\n";
    };
    return s;
  }
};

void write_curves(const fs::path& dir, const RunRecord& rec) {
  CsvWriter csv(dir / "curves.csv");
  csv.row({"step", "group", "loss"});
  for (const auto& p : rec.curves) {
    csv.row({std::to_string(p.step), group_name(p.group), fmt_double(p.loss)});
  }
}

void write_features(const fs::path& path,
                    const std::vector<std::pair<int, std::vector<double>>>& rows) {
  CsvWriter csv(path);
  if (rows.empty()) {
    csv.row({"task_group"});
    return;
  }
  std::vector<std::string> header{"task_group"};
  for (std::size_t i = 0; i < rows.front().second.size(); ++i) {
    header.push_back("f" + std::to_string(i));
  }
  csv.row(header);
  for (const auto& [group, feat] : rows) {
    std::vector<std::string> fields{group_name(group)};
    for (double v : feat) fields.push_back(fmt_double(v));
    csv.row(fields);
  }
}

void write_final(const fs::path& dir, const RunRecord& rec,
                 const TaskSuite& suite) {
  json j;
  j["steps_run"] = rec.steps_run;
  j["diverged"] = rec.diverged;
  j["stream_hash"] = rec.stream_hash;
  auto dump_eval = [&suite](const EvalResult& ev) {
    json e;
    for (int g = 0; g < suite.cfg.groups; ++g) {
      e["group_loss"][group_name(g)] = ev.group_loss[static_cast<std::size_t>(g)];
    }
    e["avg_loss"] = ev.avg_loss;
    e["layer_nmi"] = ev.layer_nmi;
    json imp = json::array();
    for (const auto& row : ev.report.group_importance) imp.push_back(row);
    e["group_importance"] = imp;
    return e;
  };
  j["init"] = dump_eval(rec.init_eval);
  j["final"] = dump_eval(rec.final_eval);
  std::ofstream os(dir / "final.json", std::ios::binary);
  os << j.dump(2) << "\n";
}

void write_meta(const fs::path& dir) {
  // Timestamps live here and only here so every other artifact is
  // byte-reproducible.
  json j;
  const auto now = std::chrono::system_clock::now();
  j["wall_clock_unix"] =
      std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch())
          .count();
  std::ofstream os(dir / "run_meta.json", std::ios::binary);
  os << j.dump(2) << "\n";
}

std::vector<int> suite_channels(const TaskSuite& suite) {
  std::vector<int> channels;
  for (const auto& enc : suite.encoders) channels.push_back(enc.channels);
  return channels;
}

int run_train(const ExperimentConfig& cfg) {
  TaskSuite suite =
      make_tasks(cfg.seed, cfg.data.groups, cfg.data.tasks_per_group, cfg.data);
  Rng init_rng = Rng(cfg.seed).fork(0x1417);

  MomeModel model = [&] {
    if (cfg.train.stage == 1) {
      ModelConfig mc = cfg.model;
      mc.mole_experts = 1;  // stage 1 trains a single adapter per layer
      mc.balance = BalanceMode::kNone;
      return MomeModel::init(mc, suite_channels(suite), init_rng);
    }
    if (cfg.stage1_checkpoint.empty()) {
      throw ConfigError("train.stage1_checkpoint required for stage 2");
    }
    ModelConfig mc = cfg.model;
    mc.mole_experts = 1;
    mc.balance = BalanceMode::kNone;
    MomeModel stage1 = MomeModel::init(mc, suite_channels(suite), init_rng);
    ParamSet ps = stage1.all_params();
    load_checkpoint(cfg.stage1_checkpoint, ps);
    Rng stage2_rng = Rng(cfg.seed).fork(0x57a2);
    MomeModel m2 = make_stage2_model(stage1, cfg.model.mole_experts,
                                     cfg.model.mole_variant, cfg.model.balance,
                                     stage2_rng);
    m2.cfg.gumbel_temperature = cfg.model.gumbel_temperature;
    return m2;
  }();

  RunWriter writer(cfg.output_dir);
  {
    std::ofstream os(writer.dir / "config.json", std::ios::binary);
    os << cfg.to_json_text() << "\n";
  }

  RoutingSinks sinks = writer.sinks();
  RunRecord rec = train(model, suite, cfg.train, &sinks);

  write_curves(writer.dir, rec);
  write_final(writer.dir, rec, suite);
  write_features(writer.dir / "vision_features.csv",
                 rec.final_eval.vision_features);
  write_features(writer.dir / "instr_features.csv",
                 rec.final_eval.instr_features);
  ParamSet ps = model.all_params();
  save_checkpoint(writer.dir / "checkpoint.mome", ps);
  write_meta(writer.dir);

  if (rec.diverged) {
    print_error("divergence", "loss became non-finite at step " +
                                  std::to_string(rec.diverged_step));
    return kNumericError;
  }
  return kOk;
}

}  // namespace

int cmd_train(const std::string& config_path, const CommonFlags& flags) {
  try {
    if (!fs::exists(config_path)) {
      print_error("config", "config file not found: " + config_path);
      return kConfigError;
    }
    ExperimentConfig cfg = ExperimentConfig::load(config_path);
    if (flags.out) cfg.output_dir = *flags.out;
    if (flags.seed) {
      cfg.seed = *flags.seed;
      cfg.train.seed = *flags.seed;
    }
    cfg.train.validate();
    return run_train(cfg);
  } catch (const ConfigError& e) {
    print_error("config", e.what());
    return kConfigError;
  } catch (const NumericError& e) {
    print_error("numeric", e.what());
    return kNumericError;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return kConfigError;
  }
}

int cmd_ablate(const std::string& config_path,
               const std::vector<std::string>& variants,
               const CommonFlags& flags) {
  try {
    if (!fs::exists(config_path)) {
      print_error("config", "config file not found: " + config_path);
      return kConfigError;
    }
    ExperimentConfig cfg = ExperimentConfig::load(config_path);
    if (flags.out) cfg.output_dir = *flags.out;
    if (flags.seed) {
      cfg.seed = *flags.seed;
      cfg.train.seed = *flags.seed;
    }
    std::vector<std::string> wanted =
        variants.empty() ? ablation_variants() : variants;
    const auto known = ablation_variants();
    for (const auto& v : wanted) {
      if (std::find(known.begin(), known.end(), v) == known.end()) {
        std::string valid;
        for (const auto& k : known) {
          if (!valid.empty()) valid += ", ";
          valid += k;
        }
        print_error("config", "unknown variant '" + v + "'; valid: " + valid);
        return kConfigError;
      }
    }

    TaskSuite suite = make_tasks(cfg.seed, cfg.data.groups,
                                 cfg.data.tasks_per_group, cfg.data);
    fs::create_directories(cfg.output_dir);
    CsvWriter csv(fs::path(cfg.output_dir) / "ablate.csv");
    csv.row({"variant", "Gen", "REC", "REG", "Doc", "Avg"});
    for (const auto& v : wanted) {
      std::array<double, 4> acc{0, 0, 0, 0};
      double avg = 0.0;
      for (int s = 0; s < cfg.ablation_seeds; ++s) {
        TrainConfig tc = cfg.train;
        tc.seed = cfg.seed + static_cast<std::uint64_t>(s);
        AblationResult r = run_ablation(v, suite, cfg.model, tc);
        if (r.record.diverged) {
          print_error("numeric", "variant " + v + " diverged");
          return kNumericError;
        }
        for (std::size_t g = 0; g < 4; ++g) acc[g] += r.group_loss[g];
        avg += r.avg_loss;
      }
      const double n = static_cast<double>(cfg.ablation_seeds);
      csv.row({v, fmt_double(acc[0] / n), fmt_double(acc[1] / n),
               fmt_double(acc[2] / n), fmt_double(acc[3] / n),
               fmt_double(avg / n)});
    }
    return kOk;
  } catch (const ConfigError& e) {
    print_error("config", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return kConfigError;
  }
}

namespace {

struct RoutingRecord {
  int step, task, layer, expert;
};

}  // namespace

int cmd_stats(const std::string& run_dir) {
  try {
    const fs::path dir(run_dir);
    std::ifstream is(dir / "routing.jsonl");
    if (!is) {
      print_error("nodata", "no routing.jsonl in " + run_dir);
      return kNoData;
    }
    std::vector<RoutingRecord> records;
    std::map<int, std::vector<double>> last_logits;  // layer -> width probe
    int max_step = 0;
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const json rec = json::parse(line);
      RoutingRecord r{rec.at("step"), rec.at("task"), rec.at("layer"),
                      rec.at("expert")};
      max_step = std::max(max_step, r.step);
      records.push_back(r);
      last_logits[r.layer] = rec.at("logits").get<std::vector<double>>();
    }
    if (records.empty()) {
      print_error("nodata", "routing.jsonl is empty");
      return kNoData;
    }

    // Group mapping from the config snapshot: task ids are group-major.
    int tasks_per_group = 2, groups = 4;
    {
      std::ifstream cs(dir / "config.json");
      if (cs) {
        const json cj = json::parse(cs);
        tasks_per_group = cj.at("data").at("tasks_per_group");
        groups = cj.at("data").at("groups");
      }
    }

    // Final-evaluation records only (the trained router's load profile).
    std::set<int> layers;
    std::set<int> tasks;
    for (const auto& r : records) {
      if (r.step != max_step) continue;
      layers.insert(r.layer);
      tasks.insert(r.task);
    }

    json summary;
    summary["evaluated_step"] = max_step;
    for (int layer : layers) {
      std::map<int, std::vector<double>> freq;  // task -> expert counts
      std::size_t n_experts = last_logits[layer].size();
      for (const auto& r : records) {
        if (r.step != max_step || r.layer != layer) continue;
        auto& row = freq[r.task];
        if (row.size() < n_experts) row.resize(n_experts, 0.0);
        if (r.expert >= static_cast<int>(row.size()))
          row.resize(static_cast<std::size_t>(r.expert) + 1, 0.0);
        row[static_cast<std::size_t>(r.expert)] += 1.0;
      }
      const std::string label =
          layer < 0 ? "vision" : "layer" + std::to_string(layer);
      CsvWriter csv(dir / ("stats_" + label + ".csv"));
      std::vector<std::string> header{"task"};
      for (std::size_t e = 0; e < n_experts; ++e)
        header.push_back("expert" + std::to_string(e));
      csv.row(header);
      std::vector<std::vector<double>> joint(
          static_cast<std::size_t>(groups),
          std::vector<double>(n_experts, 0.0));
      for (auto& [task, row] : freq) {
        row.resize(n_experts, 0.0);
        double total = 0.0;
        for (double v : row) total += v;
        const int g = task / tasks_per_group;
        for (std::size_t e = 0; e < row.size(); ++e) {
          joint[static_cast<std::size_t>(g)][e] += row[e];
        }
        std::vector<std::string> fields{std::to_string(task)};
        for (double v : row) fields.push_back(fmt_double(total > 0 ? v / total : 0.0));
        csv.row(fields);
      }
      summary["nmi"][label] = normalized_mutual_information(joint);
    }

    // Mean vision-expert importance per task.
    std::ifstream imp_is(dir / "importance.jsonl");
    if (imp_is) {
      std::map<int, std::pair<std::vector<double>, long>> acc;
      int imp_max_step = 0;
      std::vector<json> imp_records;
      while (std::getline(imp_is, line)) {
        if (line.empty()) continue;
        imp_records.push_back(json::parse(line));
        imp_max_step = std::max(imp_max_step,
                                imp_records.back().at("step").get<int>());
      }
      for (const auto& rec : imp_records) {
        if (rec.at("step").get<int>() != imp_max_step) continue;
        const auto imp = rec.at("importance").get<std::vector<double>>();
        auto& [sum, n] = acc[rec.at("task").get<int>()];
        if (sum.empty()) sum.assign(imp.size(), 0.0);
        for (std::size_t e = 0; e < imp.size(); ++e) sum[e] += imp[e];
        n += 1;
      }
      if (!acc.empty()) {
        CsvWriter csv(dir / "importance.csv");
        std::vector<std::string> header{"task"};
        for (std::size_t e = 0; e < acc.begin()->second.first.size(); ++e)
          header.push_back("expert" + std::to_string(e));
        csv.row(header);
        for (const auto& [task, entry] : acc) {
          std::vector<std::string> fields{std::to_string(task)};
          for (double v : entry.first)
            fields.push_back(fmt_double(v / static_cast<double>(entry.second)));
          csv.row(fields);
        }
      }
    }

    std::cout << summary.dump(2) << "\n";
    return kOk;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return kConfigError;
  }
}

int cmd_pca(const std::string& run_dir, const std::string& modality) {
  try {
    std::string file;
    if (modality == "vision") {
      file = "vision_features.csv";
    } else if (modality == "instruction") {
      file = "instr_features.csv";
    } else {
      print_error("config", "modality must be 'vision' or 'instruction'");
      return kConfigError;
    }
    const fs::path dir(run_dir);
    std::ifstream is(dir / file);
    if (!is) {
      print_error("nodata", "no cached features: " + (dir / file).string());
      return kNoData;
    }
    std::string line;
    std::getline(is, line);  // header
    std::vector<std::string> groups;
    std::vector<std::vector<double>> rows;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto fields = split_csv_line(line);
      if (fields.size() < 2) continue;
      groups.push_back(fields[0]);
      std::vector<double> feat;
      for (std::size_t i = 1; i < fields.size(); ++i)
        feat.push_back(std::stod(fields[i]));
      rows.push_back(std::move(feat));
    }
    if (rows.size() < 2) {
      print_error("nodata", "need at least 2 samples to project");
      return kNoData;
    }
    const int dims = std::min<int>(2, static_cast<int>(rows.size()) - 1);
    PcaResult pca = pca_project(rows, dims);
    if (dims < 2) pca.rank_deficient = true;
    const std::size_t comps = pca.components.size();
    CsvWriter csv(dir / ("pca_" + modality + ".csv"));
    std::vector<std::string> header{"task_group", "pc1"};
    if (comps > 1) header.push_back("pc2");
    csv.row(header);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::vector<std::string> fields{groups[i], fmt_double(pca.projected[i][0])};
      if (comps > 1) fields.push_back(fmt_double(pca.projected[i][1]));
      csv.row(fields);
    }
    json summary;
    summary["components"] = comps;
    summary["rank_deficient"] = pca.rank_deficient;
    summary["eigenvalues"] = pca.eigenvalues;
    std::cout << summary.dump(2) << "\n";
    return kOk;
  } catch (const ContractError& e) {
    print_error("nodata", e.what());
    return kNoData;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return kConfigError;
  }
}

}  // namespace mome::cli
