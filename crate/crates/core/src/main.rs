fn main() -> std::process::ExitCode {
    conformal_kde::cli::main()
}
