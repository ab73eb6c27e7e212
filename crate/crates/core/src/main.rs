fn main() {
    std::process::exit(dynloc::cli::main_with(std::env::args_os()));
}
