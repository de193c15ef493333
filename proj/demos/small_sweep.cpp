// Runs the smoke sweep and prints the per-job summary CSV.

#include <iostream>

#include "labroute/simulator.hpp"

using namespace labroute;

int main() {
  const std::filesystem::path dir = std::filesystem::path(LABROUTE_DATA_DIR) / "sim";
  const auto spec = sweep_from_json(read_json_file(dir / "smoke.json"), dir);
  const auto ctx = load_context(spec);
  const auto result = run_sweep(spec, ctx);
  std::cout << summary_csv(result);
  for (const auto& j : result.jobs) {
    if (!j.error.empty()) std::cerr << j.job_hash.substr(0, 16) << ": " << j.error << "\n";
  }
}
