//! Starts a Python kernel, runs cells in its shared namespace and reads
//! globals back.

use std::time::Duration;

use eui_engine::kernel::{KernelConfig, KernelSession, SyncValue};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = KernelConfig { timeout: Duration::from_secs(5), ..KernelConfig::default() };
    let kernel = KernelSession::start("example", &config).await?;

    let r = kernel.execute("xs = [n * n for n in range(5)]\nprint(sum(xs))", None).await?;
    print!("stdout: {}", r.stdout);
    println!("xs = {}", kernel.get_global("xs").await?);

    kernel.set_global("threshold", &SyncValue::new(serde_json::json!(7))?).await?;
    let r = kernel.execute("[x for x in xs if x > threshold]", None).await?;
    println!("value: {}", r.value_repr.unwrap_or_default());

    match kernel.compile_check("def broken(:\n    pass").await? {
        Ok(()) => println!("compiles"),
        Err(d) => println!("compile error: {d}"),
    }

    let err = kernel.execute("while True:\n    pass", Some(Duration::from_millis(500))).await.unwrap_err();
    println!("loop: {err}");
    kernel.shutdown().await;
    Ok(())
}
