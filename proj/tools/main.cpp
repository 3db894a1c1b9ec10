#include <cstdio>

int main() {
    std::puts("vmixer: subcommands not wired up yet");
    return 0;
}
