use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ADM_LOG", "info")).init();
    let cli = adm_cli::Cli::parse();
    match adm_cli::run(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(adm_cli::exit_code(&e));
        }
    }
}
