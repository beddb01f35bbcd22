#include <cstdio>

int main() {
  std::puts("groundgram: placeholder");
  return 0;
}
