#pragma once

namespace jointdyn::cli {

// Exit codes. Each failure class has its own code so scripts can tell them apart.
inline constexpr int kOk = 0;
inline constexpr int kFailed = 1;        // the command ran and its check failed (gradcheck, numeric blow-up)
inline constexpr int kUsage = 2;         // unknown command or flag, missing required flag
inline constexpr int kBadConfig = 3;     // config file or flag value rejected
inline constexpr int kMissingFile = 4;   // an input file or directory does not exist
inline constexpr int kBadData = 5;       // input file exists but is corrupt or unusable

int run(int argc, char** argv);

}  // namespace jointdyn::cli
