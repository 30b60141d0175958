//! Prints the tuned-parameter count of every ablation, computed from layer
//! shapes alone.
//!
//! ```text
//! cargo run --example ledger_table -- [full|mini]
//! ```

use scalpel_seg::model::{ArchConfig, ParamInventory};
use scalpel_seg::surgery::{ledger_report, ledger_table};

fn main() {
    let arch = match std::env::args().nth(1).as_deref() {
        Some("mini") => ArchConfig::mini(),
        _ => ArchConfig::full_scale(),
    };
    let rows = ledger_report(&arch);
    print!("{}", ledger_table(&rows));
    println!("total parameters: {}", arch.total_params());
}
