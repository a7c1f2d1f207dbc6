fn main() {
    std::process::exit(able_core::cli::main_exit());
}
