// Generate one table1-style data set, then compare the pooled multi-quantile
// selection with a per-experiment median analysis.
#include <cstdio>
#include <cstdlib>

#include "mqsel/selection.hpp"
#include "mqsel/simbench.hpp"

using namespace mqsel;

namespace {

void print_set(const char* label, const std::vector<std::size_t>& s) {
  std::printf("%-14s {", label);
  for (std::size_t i = 0; i < s.size(); ++i) std::printf("%s%zu", i ? ", " : "", s[i] + 1);
  std::printf("}\n");
}

}  // namespace

int main(int argc, char** argv) {
  const std::uint64_t seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 11;
  const auto scenario = SimScenario::table1(40, seed);
  const auto gen = generate(scenario);
  const auto& grid = scenario.quantiles;
  const MqbicConfig mq{default_T(scenario.p), scenario.p};
  const auto base = PenaltySpec::scad(0.0);

  const auto di = select_lambda(gen.data, grid, base, default_lambda_grid(gen.data, grid), mq);
  const auto ca = combined_analysis(gen.data, 0.5, base, {}, mq);

  std::printf("n=%zu per experiment, p=%zu, K=%zu, %zu quantile levels, seed %llu\n", scenario.n, scenario.p,
              scenario.K, grid.size(), static_cast<unsigned long long>(seed));
  print_set("true", gen.true_active);
  print_set("pooled (DI)", di.selected_predictors);
  print_set("median (CA)", ca.selected_predictors);
  std::printf("chosen lambda %.4g, MQBIC %.4f (log loss %.4f + size %.4f)\n", di.chosen_lambda.value_or(0.0),
              di.candidates[di.chosen_index].criterion.value, di.candidates[di.chosen_index].criterion.log_loss,
              di.candidates[di.chosen_index].criterion.size_term);

  const auto m_di = psr_fdr_ae(gen.true_active, di.selected_predictors, gen.truth, di.refit.coefficients, scenario.p);
  std::printf("DI psr %.3f fdr %.3f ae %.3f\n", m_di.psr, m_di.fdr, m_di.ae);

  // slopes across experiments and quantiles for each selected predictor
  for (auto j : di.selected_predictors) {
    std::printf("x%-3zu", j + 1);
    for (std::size_t k = 0; k < scenario.K; ++k) {
      std::printf("  exp%zu:", k + 1);
      for (std::size_t m = 0; m < grid.size(); ++m) std::printf(" %6.3f", di.refit.coefficients.slope(k, m, j));
    }
    std::printf("\n");
  }
}
