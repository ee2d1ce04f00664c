fn main() {
    std::process::exit(sfm_domset::cli::main_with_args(std::env::args_os()));
}
