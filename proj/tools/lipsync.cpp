#include <string>
#include <vector>

#include "lipsync/cli.hpp"

int main(int argc, char** argv) {
  return lipsync::cli::dispatch(std::vector<std::string>(argv + 1, argv + argc));
}
