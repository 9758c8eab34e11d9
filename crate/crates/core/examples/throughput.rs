//! Paillier encryption and decryption throughput at the benchmark key size.
//!
//! `cargo run --release -p fedeini --example throughput`

use std::time::Instant;

use fedeini::ahe::{keygen, Encryptor, BENCHMARK_KEY_BITS};
use num_bigint::BigUint;

fn main() {
    let keys = keygen(BENCHMARK_KEY_BITS).expect("keygen");
    let t = Instant::now();
    let enc = Encryptor::new(&keys.public);
    println!("encryptor tables: {:?}", t.elapsed());

    const N: u32 = 20_000;
    let t = Instant::now();
    for i in 0..N {
        enc.encrypt(&BigUint::from(i)).expect("encrypt");
    }
    println!("encrypt: {:?}/op", t.elapsed() / N);

    let c = enc.encrypt(&BigUint::from(1u8)).expect("encrypt");
    let t = Instant::now();
    for _ in 0..200 {
        keys.private.decrypt(&c).expect("decrypt");
    }
    println!("decrypt: {:?}/op", t.elapsed() / 200);
}
