#include <string>
#include <vector>

#include "conunetr/cli/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return conunetr::cli::dispatch(std::move(args));
}
