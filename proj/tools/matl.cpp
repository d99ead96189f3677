int main() { return 0; }  // placeholder, replaced once the library lands
