use clap::Parser;

fn main() {
    let cli = paca_cli::args::Cli::parse();
    let code = match paca_cli::execute(cli.command) {
        Ok(manifest) => {
            println!("{}", manifest.display());
            0
        }
        Err(e) => {
            eprintln!("paca: error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
