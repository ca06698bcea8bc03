//! Drive a search through the worker protocol against an in-process
//! loopback worker.

use std::net::TcpListener;
use std::thread;

use eatnas::evaluators::protocol::{echo_handler, serve_tcp, EchoConfig};
use eatnas::evaluators::{Endpoint, ExternalEvaluator};
use eatnas::evolution::{Engine, EvolutionConfig, InitSource};
use eatnas::SearchSpaceConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let address = listener.local_addr()?.to_string();
    thread::spawn(move || serve_tcp(listener, echo_handler(EchoConfig::default())));
    println!("worker at {address}");

    let space = SearchSpaceConfig::small_task();
    let evaluator = ExternalEvaluator::new(Endpoint::Tcp { address }, space.clone());
    evaluator.connect()?;
    let cfg = EvolutionConfig {
        population_size: 8,
        sample_size: 4,
        k: 2,
        max_steps: 16,
        ..EvolutionConfig::default()
    };
    let mut engine = Engine::init(cfg, space, &evaluator, InitSource::Random, ChaCha8Rng::seed_from_u64(2))?;
    engine.run_until_converged()?;
    for m in engine.population().ranked() {
        println!("{:.4} {:>9} params  {}", m.accuracy, m.params, m.arch);
    }
    Ok(())
}
