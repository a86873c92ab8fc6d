#include <cstdio>

int main() {
    std::puts("tinymm: placeholder");
    return 0;
}
