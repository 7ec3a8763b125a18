use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    // EMFORGE_THREADS caps worker parallelism; default is the logical core
    // count.
    if let Ok(threads) = std::env::var("EMFORGE_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => {
                eprintln!("error: EMFORGE_THREADS must be a positive integer");
                return ExitCode::from(1);
            }
        }
    }

    let code = emforge::cli::run(std::env::args());
    ExitCode::from(code as u8)
}
