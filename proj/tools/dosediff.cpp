// dosediff: data generation, training, sampling, evaluation and ablations.
//
// Exit codes: 0 ok, 2 config or usage error, 3 data error, 4 numeric failure.

#include <cstdio>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "dosediff/experiment.hpp"

namespace fs = std::filesystem;
using namespace dosediff;

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out;
};

exp::RunConfig load(const Common& c) {
  return c.config.empty() ? exp::RunConfig{} : exp::load_config(c.config);
}

std::vector<std::size_t> parse_ids(const std::string& list) {
  std::vector<std::size_t> ids;
  std::stringstream in(list);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    try {
      ids.push_back(item.rfind("case_", 0) == 0 ? exp::case_id(item) : std::stoul(item));
    } catch (const std::logic_error&) {
      throw exp::ConfigError("bad case id '" + item + "'");
    }
  }
  return ids;
}

std::vector<model::FusionStrategy> parse_strategies(const std::string& list) {
  std::vector<model::FusionStrategy> out;
  std::stringstream in(list);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item == "attn-lastX") {  // the 1..4 sweep
      for (int k = 1; k <= 4; ++k) out.push_back(model::FusionStrategy::attn_last(k));
    } else if (!item.empty()) {
      out.push_back(model::FusionStrategy::parse(item));
    }
  }
  return out;
}

void add_common(CLI::App* cmd, Common& c, bool with_config = true) {
  if (with_config) cmd->add_option("--config", c.config, "JSON run config (defaults apply when omitted)");
  cmd->add_option("--seed", c.seed, "Seed override")->each([&c](const std::string&) { c.seed_given = true; });
  cmd->add_option("--out", c.out, "Output directory")->required();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional diffusion dose prediction on synthetic phantoms"};
  app.require_subcommand(1);

  Common gen_c;
  auto* gen = app.add_subcommand("gen-data", "Generate phantom cases and a split manifest");
  add_common(gen, gen_c);

  Common train_c;
  std::string train_data, train_resume;
  std::uint64_t max_steps = 0;
  auto* train = app.add_subcommand("train", "Train a model; writes loss.csv and checkpoints");
  add_common(train, train_c);
  train->add_option("--data", train_data, "Dataset directory from gen-data")->required();
  train->add_option("--resume", train_resume, "Checkpoint to continue from");
  train->add_option("--max-steps", max_steps, "Stop once this many total steps are done");

  Common sample_c;
  std::string sample_ck, sample_data, sample_cases;
  auto* sample = app.add_subcommand("sample", "Sample dose maps for cases (default: test split)");
  add_common(sample, sample_c, false);
  sample->add_option("--checkpoint", sample_ck, "Checkpoint file")->required();
  sample->add_option("--data", sample_data, "Dataset directory")->required();
  sample->add_option("--cases", sample_cases, "Comma-separated case ids");

  Common eval_c;
  std::string eval_pred, eval_truth, eval_compare;
  auto* eval = app.add_subcommand("eval", "Score predictions against ground truth");
  add_common(eval, eval_c);
  eval->add_option("--pred", eval_pred, "Prediction directory")->required();
  eval->add_option("--truth", eval_truth, "Dataset directory with ground truth")->required();
  eval->add_option("--compare", eval_compare, "Second prediction directory for paired t-tests");

  Common ablate_c;
  std::string strategies = "concatenate,add-all,attn-all,attn-last2";
  auto* ablate = app.add_subcommand("ablate", "Train, sample and score several fusion strategies");
  add_common(ablate, ablate_c);
  ablate->add_option("--strategies", strategies, "Comma-separated list; attn-lastX expands to attn-last1..4")
      ->capture_default_str();

  std::string sched_config, sched_out;
  auto* sched = app.add_subcommand("dump-schedule", "Print t,beta,alpha,alpha_bar as CSV");
  sched->add_option("--config", sched_config, "JSON run config");
  sched->add_option("--out", sched_out, "Write to this file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) {
      auto cfg = load(gen_c);
      if (gen_c.seed_given) cfg.data.seed = gen_c.seed;
      const auto m = exp::gen_data(cfg, gen_c.out);
      std::cout << "wrote " << m.count << " cases (" << m.split.train.size() << " train, " << m.split.val.size()
                << " val, " << m.split.test.size() << " test) to " << gen_c.out << "\n";
    } else if (*train) {
      auto cfg = load(train_c);
      if (train_c.seed_given) cfg.seed = train_c.seed;
      exp::TrainOptions opt;
      opt.resume = train_resume;
      opt.stop_after = max_steps;
      opt.on_step = [](const exp::LossRow& r) {
        if (r.step % 25 == 0) std::cerr << "step " << r.step << " loss " << r.loss << " lr " << r.lr << "\n";
      };
      const auto ck = exp::train(cfg, train_data, train_c.out, opt);
      std::cout << "stopped at step " << ck.step << "; checkpoint " << (fs::path(train_c.out) / "last.ddck").string()
                << "\n";
    } else if (*sample) {
      const auto ck = exp::load_checkpoint(sample_ck);
      const std::uint64_t seed = sample_c.seed_given ? sample_c.seed : ck.config.sample.seed;
      const auto ids = exp::sample(ck, sample_data, sample_c.out, parse_ids(sample_cases), seed);
      std::cout << "sampled " << ids.size() << " cases to " << sample_c.out << "\n";
    } else if (*eval) {
      const auto cfg = load(eval_c);
      const auto res = exp::eval(eval_pred, eval_truth, eval_c.out, cfg.metrics, eval_compare);
      std::cout << exp::summary_csv(res);
    } else if (*ablate) {
      auto cfg = load(ablate_c);
      if (ablate_c.seed_given) cfg.seed = ablate_c.seed;
      const auto rows = exp::ablate(cfg, parse_strategies(strategies), ablate_c.out,
                                    [](const std::string& s) { std::cerr << "strategy " << s << "\n"; });
      std::cout << exp::ablation_csv(rows);
    } else if (*sched) {
      const auto cfg = sched_config.empty() ? exp::RunConfig{} : exp::load_config(sched_config);
      const std::string csv = exp::schedule_csv(cfg.schedule.build());
      if (sched_out.empty())
        std::cout << csv;
      else
        data::write_file(sched_out, csv);
    }
  } catch (const exp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const exp::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const exp::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const data::SampleFormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
