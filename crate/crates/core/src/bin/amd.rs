fn main() -> std::process::ExitCode {
    amd_distill::cli::main()
}
