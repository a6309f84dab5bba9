fn main() -> std::process::ExitCode {
    srct::cli::main()
}
