use clap::Parser;

fn main() -> anyhow::Result<()> {
    sane_core::cli::run(sane_core::cli::Cli::parse())
}
