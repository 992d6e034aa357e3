#include <string>
#include <vector>

#include "trackletmr/cli.hpp"

int main(int argc, char** argv) {
  return tmr::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
