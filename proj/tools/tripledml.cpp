#include <string>
#include <vector>

#include "tripledml/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return tripledml::cli::run(args);
}
