use edgevad::bench::TrackingAllocator;

// Lets bench reports include the allocator's peak next to resident memory.
#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .init();
    std::process::exit(edgevad_cli::dispatch(std::env::args_os()));
}
