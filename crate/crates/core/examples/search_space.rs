//! Encode, decode and validate architectures.

use eatnas::search_space::{decode, random_arch, validate, SearchSpaceConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> eatnas::Result<()> {
    let space = SearchSpaceConfig::small_task();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let arch = random_arch(&space, &mut rng)?;
    let text = arch.encode();
    println!("random arch: {text}");
    println!(
        "  {} layers, total expansion ratio {}",
        arch.total_layers(),
        arch.total_expansion_ratio()
    );
    assert_eq!(decode(&text)?, arch);

    // every block doubles its width: ratio 2^7 is above the small task's range
    let wide = text.replace("\"width\":0.5", "\"width\":2.0").replace("\"width\":1.0", "\"width\":2.0").replace("\"width\":1.5", "\"width\":2.0");
    match validate(&decode(&wide)?, &space) {
        Ok(()) => println!("widened arch validates"),
        Err(violations) => {
            for v in violations {
                println!("widened arch rejected: {v}");
            }
        }
    }

    match decode(r#"{"blocks":[{"conv":"sepconv","kernel":4,"skip":false,"width":1.0,"depth":1}]}"#) {
        Ok(_) => unreachable!(),
        Err(e) => println!("bad kernel: {e}"),
    }
    Ok(())
}
