fn main() -> std::process::ExitCode {
    dgfusion::cli::scenegen_main()
}
