#pragma once

#include <ostream>

#include "dualprompt/runconfig.hpp"

namespace dualprompt {

/// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitRuntime = 2;

/// The configured event stream: regenerated for a synthetic source, read
/// from disk (plus the optional feature sidecar) otherwise.
EventStream load_dataset(const RunConfig& config);

/// Encoder settings from the config with d_x and d_e taken from the stream.
EncoderConfig encoder_for(const RunConfig& config, const EventStream& stream);

// Each command writes only under config.out_dir. `out` gets the human
// readable summary, `log` progress lines.
void cmd_synth(const RunConfig& config, std::ostream& out);
void cmd_pretrain(const RunConfig& config, std::ostream& out);
void cmd_tune_eval(const RunConfig& config, std::ostream& out, std::ostream& log);
void cmd_ablate(const RunConfig& config, std::ostream& out, std::ostream& log);

/// Validates, then dispatches. Maps ConfigError to kExitConfig and any other
/// exception to kExitRuntime, printing the message to `err`.
int run_command(Command command, const RunConfig& config, std::ostream& out, std::ostream& err);

}  // namespace dualprompt
