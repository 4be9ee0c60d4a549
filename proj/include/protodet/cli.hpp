#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace protodet::cli {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

/// Runs one command line (without the program name). Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int main_entry(int argc, char** argv);

/// Base and held-out class ids of a named split.
struct ClassSplit {
  std::vector<int> base;
  std::vector<int> novel;
};

/// `A` holds out the last two classes, `B` the first two.
ClassSplit class_split(const std::string& name, int num_classes);

}  // namespace protodet::cli
