use clap::Parser;

fn main() {
    let cli = delaylab_cli::Cli::parse();
    std::process::exit(delaylab_cli::run(&cli));
}
