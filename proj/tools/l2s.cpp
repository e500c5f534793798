// SPDX-License-Identifier: Apache-2.0
#include <cstdio>

int main() {
  std::puts("l2s: cli under construction");
  return 2;
}
