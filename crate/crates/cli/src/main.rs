use clap::Parser;

fn main() -> anyhow::Result<()> {
    smto_cli::execute(&smto_cli::Cli::parse())
}
