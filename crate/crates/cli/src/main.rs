use clap::Parser;

// the trainer allocates many large short-lived tensors
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = sed_pcl_cli::Cli::parse();
    std::process::exit(sed_pcl_cli::run(cli));
}
