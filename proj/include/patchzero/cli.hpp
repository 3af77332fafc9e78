#pragma once

// `pz` command-line driver.
//
// Run directory layout (all paths relative to --out):
//   config.json                 resolved config of the first command run here
//   data/{train,val,test}.pzds  datasets (PZCK container)
//   models/*.pzck               classifier and detector checkpoints
//   logs/<command>.jsonl        per-epoch training records (appended)
//   attack/<name>.pzds          attacked sets with masks
//   eval/, transfer/, shape_transfer/   report.json + tables.csv
//   manifests/<command>-<n>.json        one per invocation
//
// Existing artifacts are never modified: rewriting identical bytes is a
// no-op and anything else is refused. Concurrent invocations must use
// distinct run directories.

#include <iosfwd>
#include <string>
#include <vector>

#include "patchzero/error.hpp"

namespace pz {

// Exit codes: 0 success, 1 unexpected failure, 2 missing artifact,
// 3 config, 4 format, 5 I/O, 6 value, 7 shape, 8 numeric, 9 usage.
int exit_code(ErrorKind kind);

// args excludes the program name.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_command(int argc, char** argv);

// git-describe-style version baked in at configure time.
const char* version_string();

}  // namespace pz
