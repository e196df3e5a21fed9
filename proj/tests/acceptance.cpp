#include <cstdio>
int main(){ std::puts("acceptance: build in progress"); return 1; }
