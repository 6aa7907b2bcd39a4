fn main() {
    std::process::exit(spectral_adapt::cli::main());
}
