// Runs the acceptance criteria and prints one PASS/FAIL line per criterion.
// Exit code: 0 all passed, 1 a criterion failed, 77 every requested criterion
// was blocked by missing inputs, 2 bad arguments.

#include <CLI11.hpp>
#include <iostream>
#include <sstream>

#include "criteria.hpp"
#include "lwd/errors.hpp"

int main(int argc, char** argv) {
  CLI::App cli{"Acceptance checks for the layer-wise detector"};
  std::string root = "acceptance_artifacts";
  std::string list = "1,2,3,4,5,6,7,8,9";
  cli.add_option("--root", root, "Artifact root reused across runs");
  cli.add_option("--criteria", list, "Comma-separated criterion numbers");
  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return cli.exit(e) == 0 ? 0 : 2;
  }

  std::vector<int> numbers;
  std::stringstream ss(list);
  for (std::string tok; std::getline(ss, tok, ',');) {
    try {
      numbers.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      std::cerr << "bad criterion '" << tok << "'\n";
      return 2;
    }
    if (numbers.back() < 1 || numbers.back() > 9) {
      std::cerr << "no criterion " << numbers.back() << "\n";
      return 2;
    }
  }

  lwd::acceptance::Context ctx(root);
  int failed = 0, blocked = 0;
  for (int n : numbers) {
    lwd::acceptance::Outcome out;
    try {
      out = lwd::acceptance::criterion(n)(ctx);
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail = std::string("error: ") + e.what();
    }
    const char* status = out.pass ? "PASS" : "FAIL";
    std::cout << status << " " << n << " " << lwd::acceptance::criterion_title(n) << ": "
              << (out.blocked ? "blocked, " : "") << out.detail << std::endl;
    failed += !out.pass && !out.blocked;
    blocked += out.blocked;
  }
  if (failed > 0) return 1;
  if (blocked > 0) return blocked == static_cast<int>(numbers.size()) ? 77 : 1;
  return 0;
}
