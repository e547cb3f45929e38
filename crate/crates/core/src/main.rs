fn main() -> std::process::ExitCode {
    lhe_cnn::cli::main()
}
