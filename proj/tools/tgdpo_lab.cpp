#include <string>
#include <vector>

#include "tgdpo/cli.hpp"

int main(int argc, char** argv) {
  return tgdpo::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
