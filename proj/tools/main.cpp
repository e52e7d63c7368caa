#include <cstdio>

int main() {
  std::puts("metadet: command-line interface not wired up yet");
  return 1;
}
