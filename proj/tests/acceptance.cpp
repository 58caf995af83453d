// Acceptance suite: one pass/fail line per criterion. Placeholder main while
// the suite is under construction.
#include <cstdio>
int main() {
    std::printf("acceptance suite not yet wired\n");
    return 1;
}
