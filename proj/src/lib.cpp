// Single TU that pulls in every public header, keeping them honest about
// self-containedness even before anything links against them.

#include "fsda/align.hpp"
#include "fsda/adaptor.hpp"
#include "fsda/config.hpp"
#include "fsda/diffusion.hpp"
#include "fsda/encoder.hpp"
#include "fsda/foundation.hpp"
#include "fsda/metrics.hpp"
#include "fsda/plot.hpp"
#include "fsda/runner.hpp"
#include "fsda/stage1.hpp"
#include "fsda/synthdata.hpp"
#include "fsda/version.hpp"

namespace fsda {

const char* version() { return "0.1.0"; }

}  // namespace fsda
