#include <atomic>
#include <csignal>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "diffcot/dpo_core.hpp"
#include "diffcot/pipeline.hpp"
#include "diffcot/pref_builder.hpp"
#include "diffcot/thought_search.hpp"

namespace {

std::atomic<bool> g_stop{false};

extern "C" void on_sigint(int) { g_stop.store(true); }

enum Exit { kOk = 0, kConfig = 2, kTransport = 3, kValidation = 4 };

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Step-level preference data, toy training and windowed decoding for chain-of-thought"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  int workers = 0;
  app.add_option("-c,--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("-s,--set", overrides, "Override a config value, e.g. --set window.m=3")->take_all();
  app.add_option("-o,--out", out_dir, "Output directory (overrides output_dir)");
  app.add_option("-j,--workers", workers, "Worker threads")->check(CLI::PositiveNumber);

  struct Command {
    const char* name;
    const char* help;
  };
  const Command commands[] = {
      {"generate", "Search candidate steps and write ranked ladders"},
      {"build-pairs", "Turn ladders into window-aligned preference pairs"},
      {"train-toy", "Train the toy policy with DPO and an SFT baseline"},
      {"decode", "Decode with the sliding window"},
      {"eval", "Accuracy and prefix-corruption recovery"},
      {"sweep", "Ablate window size and stride"},
  };
  for (const auto& c : commands) app.add_subcommand(c.name, c.help)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  std::vector<std::string> all_overrides = overrides;
  if (!out_dir.empty()) all_overrides.push_back("output_dir=\"" + out_dir + "\"");
  if (workers > 0) all_overrides.push_back("workers=" + std::to_string(workers));

  std::signal(SIGINT, on_sigint);
  try {
    std::optional<std::filesystem::path> file;
    if (!config_path.empty()) file = config_path;
    const auto config = diffcot::load_config(file, all_overrides);

    diffcot::CommandStatus status = diffcot::CommandStatus::ok;
    if (command == "generate") {
      status = diffcot::cmd_generate(config, std::cerr, g_stop);
    } else if (command == "build-pairs") {
      status = diffcot::cmd_build_pairs(config, std::cerr);
    } else if (command == "train-toy") {
      status = diffcot::cmd_train_toy(config, std::cerr);
    } else if (command == "decode") {
      status = diffcot::cmd_decode(config, std::cerr);
    } else if (command == "eval") {
      status = diffcot::cmd_eval(config, std::cerr);
    } else {
      status = diffcot::cmd_sweep(config, std::cerr);
    }
    return static_cast<int>(status);
  } catch (const diffcot::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const diffcot::TransportError& e) {
    std::cerr << "transport error: " << e.what() << '\n';
    for (const auto& a : e.attempts()) std::cerr << "  " << a << '\n';
    return kTransport;
  } catch (const diffcot::ProtocolError& e) {
    std::cerr << "protocol error: " << e.what() << '\n';
    return kTransport;
  } catch (const diffcot::CapabilityError& e) {
    std::cerr << "endpoint capability error: " << e.what() << '\n';
    return kTransport;
  } catch (const diffcot::ScoringError& e) {
    std::cerr << "scoring error: " << e.what() << '\n';
    return kTransport;
  } catch (const diffcot::ValidationError& e) {
    std::cerr << "validation failure: " << e.what() << '\n';
    return kValidation;
  } catch (const diffcot::PairFormatError& e) {
    std::cerr << "validation failure: " << e.what() << '\n';
    return kValidation;
  } catch (const diffcot::TrainingDiverged& e) {
    std::cerr << "validation failure: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
