use clap::Parser;

fn main() {
    if let Err(e) = rffuse::run(rffuse::Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
