use clap::Parser;

fn main() {
    let cli = cc_hardy::cli::Cli::parse();
    std::process::exit(cc_hardy::cli::main_with(cli));
}
