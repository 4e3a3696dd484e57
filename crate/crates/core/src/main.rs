fn main() -> std::process::ExitCode {
    mmdrfuse::cli::main()
}
