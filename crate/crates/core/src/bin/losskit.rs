fn main() -> std::process::ExitCode {
    dgfusion::cli::losskit_main()
}
