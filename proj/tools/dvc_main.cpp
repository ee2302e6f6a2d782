#include <cstdio>

int main() {
  std::printf("dvc: not wired up yet\n");
  return 2;
}
