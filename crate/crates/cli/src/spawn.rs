//! Demo variant where each device step is its own `otakey device` process
//! talking to the agent and cloud over loopback TCP.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use otakey_core::agent_server::registry::{save_product_orders, Registry};
use otakey_core::agent_server::{self, lock};
use otakey_core::cloud::{self, CloudClient, CloudConfig, CloudStub};
use otakey_core::scenario::demo::{assess, DemoConfig, DemoReport, INJECTED};
use otakey_core::scenario::{product_order, EPOCH};
use otakey_core::{Agent, Clock, Device, DeviceIdentity, FlashImage, KeyRng};

fn otakey(args: &[String]) -> Result<String, String> {
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let out = Command::new(exe).args(args).output().map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if out.status.success() {
        Ok(stdout)
    } else {
        Err(format!("`otakey {}` exited with {}: {}", args.join(" "), out.status, String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn device_steps(image: &Path, orders: &Path, i: usize, seed: u64, agent: &str, cloud: &str, cut: bool) -> Result<(), String> {
    let img = image.display().to_string();
    let base = |cmd: &str| -> Vec<String> {
        ["device", cmd, "--image", &img, "--seed", &seed.to_string()].map(String::from).to_vec()
    };
    let link = |cmd: &str| -> Vec<String> {
        let mut v = base(cmd);
        v.extend(["--agent", agent, "--cloud", cloud, "--backoff-ms", "10"].map(String::from));
        v
    };
    let mut burn = base("burn");
    burn.extend(["--orders".into(), orders.display().to_string(), "--index".into(), i.to_string()]);
    otakey(&burn)?;
    otakey(&link("provision"))?;
    otakey(&link("rotate"))?;
    if cut {
        let mut update = link("update");
        update.extend(["--cut-after-ops", "0", "--torn-bytes", "12"].map(String::from));
        let out = otakey(&update)?;
        if !out.contains("power lost") {
            return Err(format!("power cut did not interrupt the update: {out}"));
        }
        let mut login = base("login");
        login.extend(["--cloud".to_string(), cloud.to_string()]);
        otakey(&login)?;
        return Err(INJECTED.into());
    }
    otakey(&link("update")).map(|_| ())
}

fn load_device(image: &Path) -> anyhow::Result<Device> {
    let flash = FlashImage::from_bytes(std::fs::read(image)?)?;
    let mut idp = image.as_os_str().to_owned();
    idp.push(".id.json");
    let identity: DeviceIdentity = serde_json::from_slice(&std::fs::read(PathBuf::from(idp))?)?;
    Ok(Device::new(identity, flash, None))
}

pub fn run(cfg: &DemoConfig, out: &Path) -> anyhow::Result<DemoReport> {
    let started = Instant::now();
    let dir = out.join("devices");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut rng = KeyRng::from_seed(cfg.seed);
    let order = product_order(&mut rng, cfg.n_devices as u64, EPOCH);
    let orders = out.join("orders.json");
    save_product_orders(&orders, std::slice::from_ref(&order))?;
    let stub: Arc<CloudStub> = CloudStub::shared(CloudConfig::default(), Some(rng.next_u64()));
    let mut cloud_handle = cloud::serve(stub.clone(), "127.0.0.1:0")?;
    let cloud_addr = cloud_handle.addr();
    let agent = Agent::new(
        Registry::in_memory(vec![order.clone()]),
        Box::new(CloudClient::new(cloud_addr)),
        Clock::manual(EPOCH),
        Some(rng.next_u64()),
    );
    let service = agent_server::serve(agent, "127.0.0.1:0")?;
    let (agent_addr, cloud_addr) = (service.addr().to_string(), cloud_addr.to_string());

    let seeds: Vec<u64> = (0..cfg.n_devices).map(|_| rng.next_u64()).collect();
    let images: Vec<PathBuf> = (0..cfg.n_devices).map(|i| dir.join(format!("device-{i:05}.bin"))).collect();
    let mut results: Vec<Option<String>> = vec![None; cfg.n_devices];
    let per_worker = cfg.n_devices.div_ceil(cfg.parallel).max(1);
    std::thread::scope(|scope| {
        for (w, errs) in results.chunks_mut(per_worker).enumerate() {
            let (images, seeds, orders, agent_addr, cloud_addr) = (&images, &seeds, &orders, &agent_addr, &cloud_addr);
            scope.spawn(move || {
                for (j, e) in errs.iter_mut().enumerate() {
                    let i = w * per_worker + j;
                    let cut = cfg.fault_device == Some(i);
                    *e = device_steps(&images[i], orders, i, seeds[i], agent_addr, cloud_addr, cut).err();
                }
            });
        }
    });

    let devices = images.iter().map(|p| load_device(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let mut login = CloudClient::new(cloud_handle.addr());
    let shared = service.agent();
    let mut report = {
        let agent = lock(&shared);
        assess(cfg, &devices, &results, &agent, &stub, &order.pk, |d| login.login(d).map(|o| o.accepted()).unwrap_or(false))
    };
    service.shutdown()?;
    cloud_handle.shutdown();
    report.elapsed_ms = started.elapsed().as_millis();
    Ok(report)
}
