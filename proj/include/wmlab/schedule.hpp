#pragma once

#include <cmath>
#include <vector>

namespace wmlab {

/// Step-decay learning rate. The rate for 0-based `epoch` is
/// initial * factor^(milestones passed + epoch / step_every).
struct LrSchedule {
  double initial = 0.05;
  std::vector<int> milestones;
  int step_every = 0;  // 0 disables periodic decay
  double factor = 0.1;

  double at(int epoch) const {
    int drops = 0;
    for (int m : milestones) drops += epoch >= m ? 1 : 0;
    if (step_every > 0) drops += epoch / step_every;
    return initial * std::pow(factor, drops);
  }
};

}  // namespace wmlab
