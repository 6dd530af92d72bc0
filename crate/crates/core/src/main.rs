use clap::Parser;
use klrpn::cli::{run, Cli, EXIT_OK, EXIT_VALIDATION};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // clap uses 2 for usage errors, which is reserved for failed checks here
            std::process::exit(if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK });
        }
    };
    std::process::exit(run(cli));
}
