#pragma once

namespace fsda {
const char* version();
}
