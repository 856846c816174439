"""Flat-file serialization: CSV for inspection, npz containers for exactness.

CSV numbers are written with 17 significant digits so that a read-back
reproduces the double exactly; the npz container stores the raw arrays and is
bit-exact by construction.  All writers are deterministic: no timestamps, no
environment-dependent content, fixed key order.
"""

from __future__ import annotations

import io as _io
import zipfile

import numpy as np

from .forward import MeasurementRecord, Trajectory
from .grid import Domain

__all__ = [
    "trajectory_to_csv",
    "trajectory_to_npz",
    "trajectory_from_npz",
    "measurement_to_csv",
    "measurement_to_npz",
    "measurement_from_npz",
    "variation_stack_to_csv",
    "variation_stack_to_npz",
    "variation_stack_from_npz",
    "probe_to_csv",
    "field_to_csv",
    "fmt",
]


def fmt(x) -> str:
    """Full round-trip decimal form of a double (17 significant digits)."""
    return f"{float(x):.17g}"


def _coordinate_columns(domain: Domain):
    if domain.dim == 1:
        return ["x"], [domain.axes[0]]
    X, Y = domain.meshgrid()
    return ["x", "y"], [X.ravel(), Y.ravel()]


def trajectory_to_csv(path, traj: Trajectory):
    """One row per (time, node): t,x[,y],u,v,w."""
    names, coords = _coordinate_columns(traj.domain)
    n_nodes = traj.domain.node_count
    with open(path, "w") as fh:
        fh.write("t," + ",".join(names) + ",u,v,w\n")
        for i, t in enumerate(traj.times):
            u = traj.u[i].ravel()
            v = traj.v[i].ravel()
            w = traj.w[i].ravel()
            ts = fmt(t)
            for j in range(n_nodes):
                cols = [ts] + [fmt(c[j]) for c in coords] + [fmt(u[j]), fmt(v[j]), fmt(w[j])]
                fh.write(",".join(cols) + "\n")


def _savez_deterministic(path, **arrays):
    """np.savez with a fixed zip timestamp so identical data gives identical bytes."""
    with zipfile.ZipFile(path, mode="w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = _io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]))
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def trajectory_to_npz(path, traj: Trajectory):
    _savez_deterministic(
        path,
        lengths=np.array(traj.domain.lengths),
        cells=np.array(traj.domain.cells, dtype=np.int64),
        times=traj.times, u=traj.u, v=traj.v, w=traj.w,
    )


def trajectory_from_npz(path) -> Trajectory:
    with np.load(path) as data:
        domain = Domain(tuple(data["lengths"]), tuple(int(c) for c in data["cells"]))
        return Trajectory(domain, data["times"], data["u"], data["v"], data["w"])


def measurement_to_csv(path_base, rec: MeasurementRecord, domain: Domain):
    """Boundary traces to <base>_traces.csv, final fields to <base>_final.csv."""
    names, coords = _coordinate_columns(domain)
    idx = rec.boundary_flat_indices
    with open(f"{path_base}_traces.csv", "w") as fh:
        fh.write("t," + ",".join(names) + ",u,v,w\n")
        for i, t in enumerate(rec.times):
            ts = fmt(t)
            for j, node in enumerate(idx):
                cols = [ts] + [fmt(c[node]) for c in coords]
                cols += [fmt(rec.boundary_u[i, j]), fmt(rec.boundary_v[i, j]),
                         fmt(rec.boundary_w[i, j])]
                fh.write(",".join(cols) + "\n")
    with open(f"{path_base}_final.csv", "w") as fh:
        fh.write("t," + ",".join(names) + ",u,v,w\n")
        ts = fmt(rec.times[-1])
        fu, fv, fw = rec.final_u.ravel(), rec.final_v.ravel(), rec.final_w.ravel()
        for j in range(domain.node_count):
            cols = [ts] + [fmt(c[j]) for c in coords] + [fmt(fu[j]), fmt(fv[j]), fmt(fw[j])]
            fh.write(",".join(cols) + "\n")


def measurement_to_npz(path, rec: MeasurementRecord, domain: Domain):
    _savez_deterministic(
        path,
        lengths=np.array(domain.lengths),
        cells=np.array(domain.cells, dtype=np.int64),
        times=rec.times,
        boundary_u=rec.boundary_u, boundary_v=rec.boundary_v, boundary_w=rec.boundary_w,
        final_u=rec.final_u, final_v=rec.final_v, final_w=rec.final_w,
        boundary_flat_indices=rec.boundary_flat_indices,
    )


def measurement_from_npz(path):
    with np.load(path) as data:
        domain = Domain(tuple(data["lengths"]), tuple(int(c) for c in data["cells"]))
        rec = MeasurementRecord(
            times=data["times"],
            boundary_u=data["boundary_u"], boundary_v=data["boundary_v"],
            boundary_w=data["boundary_w"],
            final_u=data["final_u"], final_v=data["final_v"], final_w=data["final_w"],
            boundary_flat_indices=data["boundary_flat_indices"],
        )
        return rec, domain


def variation_stack_to_csv(path, stack):
    """Same row layout as a trajectory, with order and provenance columns."""
    traj = stack.order1
    names, coords = _coordinate_columns(traj.domain)
    n_nodes = traj.domain.node_count
    with open(path, "w") as fh:
        fh.write("order,provenance,t," + ",".join(names) + ",u,v,w\n")
        for order, tr in ((1, stack.order1), (2, stack.order2)):
            if tr is None:
                continue
            for i, t in enumerate(tr.times):
                u, v, w = tr.u[i].ravel(), tr.v[i].ravel(), tr.w[i].ravel()
                head = f"{order},{stack.provenance},{fmt(t)}"
                for j in range(n_nodes):
                    cols = [head] + [fmt(c[j]) for c in coords]
                    cols += [fmt(u[j]), fmt(v[j]), fmt(w[j])]
                    fh.write(",".join(cols) + "\n")


def variation_stack_to_npz(path, stack):
    traj = stack.order1
    arrays = dict(
        lengths=np.array(traj.domain.lengths),
        cells=np.array(traj.domain.cells, dtype=np.int64),
        times=traj.times,
        u1=traj.u, v1=traj.v, w1=traj.w,
        provenance=np.array(stack.provenance),
    )
    if stack.order2 is not None:
        arrays.update(u2=stack.order2.u, v2=stack.order2.v, w2=stack.order2.w)
    _savez_deterministic(path, **arrays)


def variation_stack_from_npz(path):
    from .variation import VariationStack
    with np.load(path) as data:
        domain = Domain(tuple(data["lengths"]), tuple(int(c) for c in data["cells"]))
        order1 = Trajectory(domain, data["times"], data["u1"], data["v1"], data["w1"])
        order2 = None
        if "u2" in data:
            order2 = Trajectory(domain, data["times"], data["u2"], data["v2"], data["w2"])
        return VariationStack(order1=order1, order2=order2,
                              provenance=str(data["provenance"]))


def probe_to_csv(path, domain: Domain, times, probe):
    """Sampled probe values on the grid, one row per (time, node)."""
    names, coords = _coordinate_columns(domain)
    vals = probe.sample(domain, times)
    with open(path, "w") as fh:
        fh.write("t," + ",".join(names) + ",re,im\n")
        for i, t in enumerate(np.atleast_1d(times)):
            ts = fmt(t)
            flat = vals[i].ravel()
            for j in range(domain.node_count):
                cols = [ts] + [fmt(c[j]) for c in coords] + [fmt(flat[j].real), fmt(flat[j].imag)]
                fh.write(",".join(cols) + "\n")


def field_to_csv(path, domain: Domain, values):
    names, coords = _coordinate_columns(domain)
    flat = np.asarray(values).ravel()
    with open(path, "w") as fh:
        fh.write(",".join(names) + ",value\n")
        for j in range(domain.node_count):
            fh.write(",".join([fmt(c[j]) for c in coords] + [fmt(flat[j])]) + "\n")
