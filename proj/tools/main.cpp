#include <string>
#include <vector>

#include "svfm/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return svfm::cli::run_command(args);
}
