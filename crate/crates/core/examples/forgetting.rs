//! Desk-scale forgetting experiment: pretrain a small model on two tasks,
//! LoRA-tune it on one, and report what happens to the other.
//!
//! `cargo run --release -p peftkit-core --example forgetting [-- q4]`

#[path = "../tests/common/desk.rs"]
mod desk;

use peftkit::evalkit::render_table;
use peftkit::peft::BaseMode;

fn main() {
    let quantized = std::env::args().any(|a| a == "q4");
    let base = desk::pretrained_base();
    let (base, mode) = if quantized {
        (
            base.quantized(64).expect("desk weights quantize"),
            BaseMode::Quantized4,
        )
    } else {
        (base, BaseMode::Float32)
    };
    let outcome = desk::run(&base, mode);
    println!(
        "fine-tuned {} adapter parameters on task A (uppercase), {:.1}s",
        outcome.peft.num_params(),
        outcome.train.wall_clock_seconds
    );
    println!("task A\n{}", render_table(&outcome.task_a));
    println!("task B (held out)\n{}", render_table(&outcome.task_b));
}
