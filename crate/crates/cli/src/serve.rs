use std::sync::Arc;

use log::info;
use nanolens_service::{router, AppState, ServiceConfig};

use crate::args::ServeArgs;
use crate::error::{CliError, CliResult};
use crate::manifest::ManifestBuilder;

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    info!("shutting down");
}

pub fn serve(args: &ServeArgs) -> CliResult<()> {
    if !args.ckpt_dir.is_dir() {
        return Err(CliError::runtime(format!(
            "checkpoint directory {} does not exist",
            args.ckpt_dir.display()
        )));
    }
    let mut cfg = ServiceConfig::new(&args.ckpt_dir, &args.data_dir);
    cfg.static_dir = args.static_dir.clone();
    cfg.max_upload_bytes = args.max_upload_bytes;
    if let Some(w) = args.workers {
        if w == 0 {
            return Err(CliError::usage("--workers must be at least 1"));
        }
        cfg.workers = w;
    }
    let mut m = ManifestBuilder::new("serve", args, None, &args.data_dir);
    let state = AppState::open(&cfg).map_err(|e| {
        CliError::runtime(format!("cannot open {}: {e}", args.ckpt_dir.display()))
    })?;
    for d in &state.catalog.invalid {
        log::warn!("invalid checkpoint {}: {}", d.file, d.reason);
    }
    for loaded in state.catalog.models.values() {
        m.input_checkpoint(&args.ckpt_dir.join(format!("{}.ckpt", loaded.entry.id)));
    }
    let app = router(Arc::new(state), cfg.static_dir.clone());

    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::runtime(format!("cannot start runtime: {e}")))?;
    rt.block_on(async {
        let addr = format!("{}:{}", args.host, args.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::runtime(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr()?;
        // Printed on stdout so scripts can find an ephemeral port.
        println!("listening on http://{local}");
        nanolens_service::serve(listener, app, shutdown_signal())
            .await
            .map_err(|e| CliError::runtime(format!("server error: {e}")))
    })?;
    m.finish()?;
    Ok(())
}
