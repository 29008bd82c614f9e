use clap::Parser;
use nowcast_tools::cli::{self, Cli};
use nowcast_tools::EXIT_CONFIG;

fn main() {
    // usage mistakes are config errors under the exit-code contract
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            if err.use_stderr() {
                eprint!("{err}");
                std::process::exit(EXIT_CONFIG);
            }
            // --help and --version print to stdout and succeed
            print!("{err}");
            std::process::exit(0);
        }
    };
    std::process::exit(cli::run(cli));
}
