#include <cstdio>

int main() {
  std::puts("cotrack: cli not wired yet");
  return 0;
}
