"""Multi-fidelity crystal graph network.

The energy of a cell at fidelity ``f`` is a per-fidelity composition term
plus a sum of per-atom readouts of the final atom features. Fidelity enters
through four independently switchable routes:

* ``E``: an additive fidelity embedding on the initial atom features,
* ``M``: a one-hot fidelity input to the first layer of every gated MLP
  in the atom, bond and angle updates,
* ``R``: one readout head per fidelity,
* ``C``: one column of composition weights per fidelity.

Forces and stress are exact derivatives of the energy with respect to
positions and a symmetric strain applied to every bond vector.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .graph import (
    DEFAULT_R_ATOM,
    DEFAULT_R_BOND,
    N_ANGULAR,
    N_RADIAL,
    CrystalGraph,
    angular_basis,
    build_crystal_graph,
    cosine_envelope,
    radial_basis,
)
from .structures import N_ELEMENTS, LabeledFrame, Structure, composition_vector
from .tensorcore import DTYPE, energy_derivatives, symmetric_strain

CHECKPOINT_FORMAT = "mfforce-checkpoint/1"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class FidelityConfig:
    n_fidelities: int = 2
    enable_E: bool = True
    enable_M: bool = True
    enable_R: bool = True
    enable_C: bool = True

    def __post_init__(self):
        if self.n_fidelities < 1:
            raise ValueError("n_fidelities must be >= 1")

    @classmethod
    def all_off(cls, n_fidelities: int = 2) -> FidelityConfig:
        return cls(n_fidelities, False, False, False, False)


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 64
    hidden_dim: int = 64
    n_layers: int = 4
    n_radial: int = N_RADIAL
    n_angular: int = N_ANGULAR
    r_atom: float = DEFAULT_R_ATOM
    r_bond: float = DEFAULT_R_BOND

    def __post_init__(self):
        if self.n_layers < 2:
            raise ValueError("n_layers must be >= 2 (magmoms read the penultimate layer)")
        if not 0 < self.r_bond <= self.r_atom:
            raise ValueError("need 0 < r_bond <= r_atom")


@dataclass(frozen=True, eq=False)
class Prediction:
    energy: float
    forces: np.ndarray
    stress: np.ndarray
    magmoms: np.ndarray


def one_hot_fidelity(f, n_fidelities: int) -> torch.Tensor:
    """One-hot rows for 1-based fidelity tags (scalar or 1-D)."""
    idx = torch.as_tensor(f, dtype=torch.long)
    if bool((idx < 1).any()) or bool((idx > n_fidelities).any()):
        raise ValueError(f"fidelity {f} outside [1, {n_fidelities}]")
    return nn.functional.one_hot(idx - 1, n_fidelities).to(DTYPE)


def fidelity_linear(a, f_g, W, W_F, b, enable_M: bool = True) -> torch.Tensor:
    """``W a + W_F f_g + b``; the fidelity term is dropped when ``enable_M`` is off.

    ``a`` is (..., in) and ``f_g`` the matching (..., n_F) one-hot rows.
    """
    if a.shape[-1] != W.shape[1]:
        raise ValueError(f"input dim {a.shape[-1]} does not match weight {tuple(W.shape)}")
    out = a @ W.T + b
    if enable_M:
        if f_g.shape[-1] != W_F.shape[1]:
            raise ValueError(f"one-hot dim {f_g.shape[-1]} does not match W_F {tuple(W_F.shape)}")
        out = out + f_g @ W_F.T
    return out


def _uniform_(t: torch.Tensor, fan_in: int, fan_out: int, gen: torch.Generator) -> None:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        t.copy_(torch.rand(t.shape, generator=gen, dtype=DTYPE) * (2 * bound) - bound)


class FidelityLinear(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, n_fidelities: int, enable_M: bool):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(out_dim, in_dim, dtype=DTYPE))
        self.weight_fidelity = nn.Parameter(torch.zeros(out_dim, n_fidelities, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(out_dim, dtype=DTYPE))
        self.enable_M = enable_M

    def forward(self, a, f_g):
        return fidelity_linear(a, f_g, self.weight, self.weight_fidelity, self.bias, self.enable_M)


class Linear(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(out_dim, in_dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(out_dim, dtype=DTYPE)) if bias else None

    def forward(self, x):
        if x.shape[-1] != self.weight.shape[1]:
            raise ValueError(f"input dim {x.shape[-1]} does not match {tuple(self.weight.shape)}")
        out = x @ self.weight.T
        return out + self.bias if self.bias is not None else out


class GatedMLP(nn.Module):
    """``sigmoid(gate(x)) * silu(core(x))`` with one hidden layer per branch.

    Fidelity one-hots enter the first layer of both branches.
    """

    def __init__(self, in_dim, hidden_dim, out_dim, n_fidelities, enable_M):
        super().__init__()
        self.core_in = FidelityLinear(in_dim, hidden_dim, n_fidelities, enable_M)
        self.core_out = Linear(hidden_dim, out_dim)
        self.gate_in = FidelityLinear(in_dim, hidden_dim, n_fidelities, enable_M)
        self.gate_out = Linear(hidden_dim, out_dim)
        self.enable_M = enable_M

    def forward(self, x, f_g):
        act = nn.functional.silu
        core = act(self.core_out(act(self.core_in(x, f_g))))
        gate = torch.sigmoid(self.gate_out(act(self.gate_in(x, f_g))))
        return gate * core

    def forward_blocks(self, blocks, fidelity_index):
        """Same map as :meth:`forward` on ``cat([feats[rows] for feats, rows in blocks])``.

        Each block is projected before it is gathered, so features shared by
        many rows (an atom seen by all of its bonds) are multiplied once.
        ``fidelity_index`` holds the 1-based fidelity of every output row.
        """
        h = self.core_in.weight.shape[0]
        weight = torch.cat([self.core_in.weight, self.gate_in.weight], dim=0)
        pre = None
        offset = 0
        for feats, rows in blocks:
            k = feats.shape[-1]
            proj = feats @ weight[:, offset : offset + k].T
            offset += k
            if rows is not None:
                proj = proj[rows]
            pre = proj if pre is None else pre + proj
        if offset != weight.shape[1]:
            raise ValueError(f"blocks provide {offset} features, layer expects {weight.shape[1]}")
        pre = pre + torch.cat([self.core_in.bias, self.gate_in.bias])
        if self.enable_M:
            w_f = torch.cat([self.core_in.weight_fidelity, self.gate_in.weight_fidelity], dim=0)
            pre = pre + w_f.T[fidelity_index - 1]
        hidden = nn.functional.silu(pre)
        core = nn.functional.silu(self.core_out(hidden[:, :h]))
        gate = torch.sigmoid(self.gate_out(hidden[:, h:]))
        return gate * core


def gated_mlp(x, f_g, mlp: GatedMLP) -> torch.Tensor:
    return mlp(x, f_g)


def atom_conv(v, e, src, dst, envelope, fid_edge, mlp: GatedMLP) -> torch.Tensor:
    """Residual atom update: ``v_i + sum_j env(d_ij) * phi_v([v_i, v_j, e_ij, f_g])``.

    ``fid_edge`` is the 1-based fidelity of each bond's graph.
    """
    messages = mlp.forward_blocks([(v, src), (v, dst), (e, None)], fid_edge)
    return v.index_add(0, src, envelope[:, None] * messages)


def bond_conv(e, a, v, edge_a, edge_b, center, weight, fid_triplet, mlp: GatedMLP):
    """Residual bond update; each triplet's message goes to its second bond."""
    if len(edge_a) == 0:
        return e
    messages = mlp.forward_blocks([(e, edge_a), (e, edge_b), (a, None), (v, center)], fid_triplet)
    return e.index_add(0, edge_b, weight[:, None] * messages)


def angle_update(e, a, v, edge_a, edge_b, center, fid_triplet, mlp: GatedMLP):
    """Replacement angle update from the freshly updated bonds and center atom."""
    if len(edge_a) == 0:
        return a
    return mlp.forward_blocks([(e, edge_a), (e, edge_b), (a, None), (v, center)], fid_triplet)


class ReadoutHead(nn.Module):
    def __init__(self, feature_dim, hidden_dim):
        super().__init__()
        self.hidden = Linear(feature_dim, hidden_dim)
        self.out = Linear(hidden_dim, 1)

    def forward(self, v):
        return self.out(nn.functional.silu(self.hidden(v))).squeeze(-1)


class ConvLayer(nn.Module):
    def __init__(self, d, hidden, n_fidelities, enable_M, with_bond_update: bool):
        super().__init__()
        self.atom_mlp = GatedMLP(3 * d, hidden, d, n_fidelities, enable_M)
        if with_bond_update:
            self.bond_mlp = GatedMLP(4 * d, hidden, d, n_fidelities, enable_M)
            self.angle_mlp = GatedMLP(4 * d, hidden, d, n_fidelities, enable_M)
        else:
            self.bond_mlp = self.angle_mlp = None


@dataclass(eq=False)
class GraphBatch:
    """Several crystal graphs concatenated into one disconnected graph."""

    positions: torch.Tensor
    species: torch.Tensor
    atom_graph_index: torch.Tensor
    lattices: torch.Tensor
    volumes: torch.Tensor
    fidelities: torch.Tensor
    n_atoms: torch.Tensor
    src: torch.Tensor
    dst: torch.Tensor
    images: torch.Tensor
    edge_graph_index: torch.Tensor
    edge_a: torch.Tensor
    edge_b: torch.Tensor
    center: torch.Tensor

    @property
    def n_graphs(self) -> int:
        return len(self.fidelities)


def collate(structures: Sequence[Structure], fidelities: Sequence[int], graphs: Sequence[CrystalGraph]) -> GraphBatch:
    atom_offset = 0
    edge_offset = 0
    parts = {k: [] for k in ("pos", "z", "agi", "src", "dst", "img", "egi", "ea", "eb", "c")}
    for g_idx, (s, g) in enumerate(zip(structures, graphs)):
        ag, bg = g.atom_graph, g.bond_graph
        parts["pos"].append(s.positions)
        parts["z"].append(s.species)
        parts["agi"].append(np.full(s.n_atoms, g_idx))
        parts["src"].append(ag.src + atom_offset)
        parts["dst"].append(ag.dst + atom_offset)
        parts["img"].append(ag.images)
        parts["egi"].append(np.full(ag.n_edges, g_idx))
        parts["ea"].append(bg.edge_a + edge_offset)
        parts["eb"].append(bg.edge_b + edge_offset)
        parts["c"].append(bg.center + atom_offset)
        atom_offset += s.n_atoms
        edge_offset += ag.n_edges

    def cat(key, dtype):
        return torch.as_tensor(np.concatenate(parts[key]), dtype=dtype)

    return GraphBatch(
        positions=cat("pos", DTYPE),
        species=cat("z", torch.long),
        atom_graph_index=cat("agi", torch.long),
        lattices=torch.as_tensor(np.stack([s.lattice for s in structures]), dtype=DTYPE),
        volumes=torch.as_tensor([s.volume for s in structures], dtype=DTYPE),
        fidelities=torch.as_tensor(list(fidelities), dtype=torch.long),
        n_atoms=torch.as_tensor([s.n_atoms for s in structures], dtype=torch.long),
        src=cat("src", torch.long),
        dst=cat("dst", torch.long),
        images=cat("img", DTYPE).reshape(-1, 3),
        edge_graph_index=cat("egi", torch.long),
        edge_a=cat("ea", torch.long),
        edge_b=cat("eb", torch.long),
        center=cat("c", torch.long),
    )


class MultiFidelityModel(nn.Module):
    def __init__(
        self,
        model_config: ModelConfig | None = None,
        fidelity_config: FidelityConfig | None = None,
        seed: int = 0,
    ):
        super().__init__()
        self.model_config = mc = model_config or ModelConfig()
        self.fidelity_config = fc = fidelity_config or FidelityConfig()
        d, h, nf = mc.feature_dim, mc.hidden_dim, fc.n_fidelities
        self.element_embedding = nn.Parameter(torch.zeros(N_ELEMENTS, d, dtype=DTYPE))
        self.fidelity_embedding = nn.Parameter(torch.zeros(nf, d, dtype=DTYPE))
        self.bond_embedding = Linear(mc.n_radial, d, bias=False)
        self.angle_embedding = Linear(mc.n_angular, d, bias=False)
        self.layers = nn.ModuleList(
            ConvLayer(d, h, nf, fc.enable_M, with_bond_update=(t < mc.n_layers - 1))
            for t in range(mc.n_layers)
        )
        self.readout_heads = nn.ModuleList(ReadoutHead(d, h) for _ in range(nf))
        self.magmom_head = Linear(d, 1)
        # eV/atom; fit by least squares before training and kept frozen
        self.composition = nn.Parameter(torch.zeros(N_ELEMENTS, nf, dtype=DTYPE), requires_grad=False)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        """Glorot-uniform weights; zero biases, fidelity embeddings, and fidelity columns.

        Every readout head starts as a copy of head 1.
        """
        gen = torch.Generator().manual_seed(int(seed))
        for name, p in self.named_parameters():
            if p.ndim < 2 or "weight_fidelity" in name or name in (
                "fidelity_embedding",
                "composition",
            ):
                with torch.no_grad():
                    p.zero_()
            elif name.startswith("readout_heads.") and not name.startswith("readout_heads.0."):
                continue
            else:
                fan_out, fan_in = p.shape
                _uniform_(p, fan_in, fan_out, gen)
        with torch.no_grad():
            for head in self.readout_heads[1:]:
                for dst, src in zip(head.parameters(), self.readout_heads[0].parameters()):
                    dst.copy_(src)

    @property
    def n_fidelities(self) -> int:
        return self.fidelity_config.n_fidelities

    def embed(self, species: torch.Tensor, fidelities: torch.Tensor) -> torch.Tensor:
        if bool((species < 1).any()) or bool((species > N_ELEMENTS).any()):
            raise ValueError(f"atomic numbers must lie in [1, {N_ELEMENTS}]")
        v = self.element_embedding[species - 1]
        if self.fidelity_config.enable_E:
            v = v + self.fidelity_embedding[fidelities - 1]
        return v

    def readout_energy(self, v, atom_fidelities, atom_graph_index, n_graphs) -> torch.Tensor:
        energy = torch.zeros(n_graphs, dtype=DTYPE)
        if not self.fidelity_config.enable_R:
            return energy.index_add(0, atom_graph_index, self.readout_heads[0](v))
        for f in torch.unique(atom_fidelities).tolist():
            idx = torch.nonzero(atom_fidelities == f).squeeze(-1)
            energy = energy.index_add(0, atom_graph_index[idx], self.readout_heads[f - 1](v[idx]))
        return energy

    def composition_energy_per_atom(self, species, atom_fidelities) -> torch.Tensor:
        cols = atom_fidelities if self.fidelity_config.enable_C else torch.ones_like(atom_fidelities)
        return self.composition[species - 1, cols - 1]

    def forward(
        self,
        batch: GraphBatch,
        compute_forces: bool = True,
        compute_stress: bool = True,
        create_graph: bool = False,
    ) -> dict[str, torch.Tensor]:
        mc, fc = self.model_config, self.fidelity_config
        if bool((batch.fidelities < 1).any()) or bool((batch.fidelities > fc.n_fidelities).any()):
            raise ValueError(f"fidelity outside [1, {fc.n_fidelities}]")
        need_grad = compute_forces or compute_stress
        with torch.enable_grad() if need_grad else torch.no_grad():
            positions = batch.positions.detach().clone().requires_grad_(compute_forces or compute_stress)
            strain = torch.zeros(batch.n_graphs, 3, 3, dtype=DTYPE, requires_grad=compute_stress)
            deform = symmetric_strain(strain)
            egi = batch.edge_graph_index
            raw = positions[batch.dst] - positions[batch.src]
            raw = raw + torch.einsum("ek,ekl->el", batch.images, batch.lattices[egi])
            vectors = torch.einsum("ek,ekl->el", raw, deform[egi])
            dist = torch.linalg.vector_norm(vectors, dim=-1)
            unit = vectors / dist[:, None]

            atom_f = batch.fidelities[batch.atom_graph_index]
            fid_edge = atom_f[batch.src]
            fid_trip = atom_f[batch.center]

            env_atom = cosine_envelope(dist, mc.r_atom)
            e = self.bond_embedding(_radial(dist, mc.r_atom, mc.n_radial))
            ea, eb, center = batch.edge_a, batch.edge_b, batch.center
            cos = (unit[ea] * unit[eb]).sum(-1)
            a = self.angle_embedding(angular_basis(cos.clamp(-1.0, 1.0), mc.n_angular))
            trip_weight = cosine_envelope(dist[ea], mc.r_bond) * cosine_envelope(dist[eb], mc.r_bond)

            v = self.embed(batch.species, atom_f)
            penultimate = None
            for t, layer in enumerate(self.layers):
                v_next = atom_conv(v, e, batch.src, batch.dst, env_atom, fid_edge, layer.atom_mlp)
                if layer.bond_mlp is not None:
                    e_next = bond_conv(e, a, v_next, ea, eb, center, trip_weight, fid_trip, layer.bond_mlp)
                    a = angle_update(e_next, a, v_next, ea, eb, center, fid_trip, layer.angle_mlp)
                    e = e_next
                v = v_next
                if t == mc.n_layers - 2:
                    penultimate = v

            energy = self.readout_energy(v, atom_f, batch.atom_graph_index, batch.n_graphs)
            comp = self.composition_energy_per_atom(batch.species, atom_f)
            energy = energy.index_add(0, batch.atom_graph_index, comp)
            magmoms = self.magmom_head(penultimate).squeeze(-1)

            out = {"energy": energy, "magmoms": magmoms}
            if need_grad:
                grad_pos, grad_strain = energy_derivatives(
                    energy,
                    positions,
                    strain if compute_stress else None,
                    create_graph=create_graph,
                )
                if compute_forces:
                    out["forces"] = -grad_pos
                if compute_stress:
                    out["stress"] = grad_strain / batch.volumes[:, None, None]
        return out

    def fidelity_exclusive_slices(self, f: int) -> dict[str, tuple[torch.Tensor, tuple]]:
        """Parameters (or parameter slices) only fidelity ``f`` can reach.

        Maps a readable name to ``(tensor, index)`` with ``tensor[index]`` the slice.
        """
        out = {"fidelity_embedding": (self.fidelity_embedding, (f - 1,))}
        for name, p in self.named_parameters():
            if name.endswith("weight_fidelity"):
                out[name] = (p, (slice(None), f - 1))
        for name, p in self.readout_heads[f - 1].named_parameters():
            out[f"readout_heads.{f - 1}.{name}"] = (p, (Ellipsis,))
        out["composition"] = (self.composition, (slice(None), f - 1))
        return out

    def predict(self, structure: Structure, fidelity: int, graph: CrystalGraph | None = None) -> Prediction:
        return predict(structure, fidelity, self, graph)

    def save(self, path) -> None:
        save_checkpoint(self, path)


def _radial(dist, r_cut, n):
    # unchecked: distances were filtered by the neighbor list at the same geometry
    width = r_cut / (n - 1) if n > 1 else r_cut
    centers = torch.linspace(0.0, r_cut, n, dtype=DTYPE) if n > 1 else torch.zeros(1, dtype=DTYPE)
    return torch.exp(-0.5 * ((dist[:, None] - centers) / width) ** 2) * cosine_envelope(dist, r_cut)[:, None]


def graph_for(structure: Structure, model: MultiFidelityModel, fidelity: int | None = None) -> CrystalGraph:
    mc = model.model_config
    return build_crystal_graph(structure, mc.r_atom, mc.r_bond, fidelity)


def predict(
    structure: Structure,
    fidelity: int,
    model: MultiFidelityModel,
    graph: CrystalGraph | None = None,
) -> Prediction:
    """Energy, forces, stress and magmoms of one structure at one fidelity."""
    one_hot_fidelity(fidelity, model.n_fidelities)
    graph = graph or graph_for(structure, model, fidelity)
    out = model(collate([structure], [fidelity], [graph]))
    return Prediction(
        energy=float(out["energy"][0].detach()),
        forces=out["forces"].detach().numpy(),
        stress=out["stress"][0].detach().numpy(),
        magmoms=out["magmoms"].detach().numpy(),
    )


def predict_energy(structure: Structure, fidelity: int, model: MultiFidelityModel) -> float:
    graph = graph_for(structure, model, fidelity)
    with torch.no_grad():
        out = model(collate([structure], [fidelity], [graph]), compute_forces=False, compute_stress=False)
    return float(out["energy"][0])


def composition_energy(x: np.ndarray, f: int, weights: np.ndarray, enable_C: bool = True) -> float:
    """Per-atom composition energy ``sum_a w[a, f] x_a``.

    ``x`` is a composition vector indexed by atomic number (length 95, entry 0
    unused) and ``weights`` the (94, n_F) table.
    """
    col = f - 1 if enable_C else 0
    return float(np.dot(np.asarray(x)[1 : N_ELEMENTS + 1], np.asarray(weights)[:, col]))


def fit_composition(
    frames: Sequence[LabeledFrame],
    n_fidelities: int,
    enable_C: bool = True,
    fidelities: Sequence[int] | None = None,
) -> np.ndarray:
    """Least-squares per-atom reference energies, one column per fidelity.

    Solves ``E/N ~ sum_a w_a x_a`` with the minimum-norm solution, so elements
    that never occur get zero weight and elements locked in fixed ratios share
    the energy evenly. With ``enable_C`` off all frames are pooled into one
    fit, copied to every column. With it on, each fidelity's column is the
    pooled fit plus a minimum-norm correction fitted to that fidelity's
    residuals: the solution is unchanged when the fidelity's composition
    matrix has full column rank, and an element the fidelity never sees keeps
    its pooled reference energy instead of dropping to zero. Columns of
    fidelities without frames stay zero unless they are listed in
    ``fidelities``, which makes them required.
    """
    weights = np.zeros((N_ELEMENTS, n_fidelities))
    if not enable_C:
        if not frames:
            raise ValueError("cannot fit composition: no frames")
        col = _lstsq_composition(frames)
        weights[:] = col[:, None]
        return weights
    groups: dict[int, list[LabeledFrame]] = {}
    for fr in frames:
        if not 1 <= fr.fidelity <= n_fidelities:
            raise ValueError(f"fidelity {fr.fidelity} outside [1, {n_fidelities}]")
        groups.setdefault(fr.fidelity, []).append(fr)
    wanted = sorted(groups) if fidelities is None else list(fidelities)
    for f in wanted:
        if not groups.get(f):
            raise ValueError(f"cannot fit composition for fidelity {f}: no frames")
    if not wanted:
        return weights
    pooled = _lstsq_composition(frames)
    for f in wanted:
        weights[:, f - 1] = _lstsq_composition(groups[f], prior=pooled)
    return weights


def _lstsq_composition(frames: Sequence[LabeledFrame], prior: np.ndarray | None = None) -> np.ndarray:
    X = np.stack([composition_vector(fr.structure)[1:] for fr in frames])
    y = np.array([fr.energy / fr.n_atoms for fr in frames])
    if prior is None:
        w, *_ = np.linalg.lstsq(X, y, rcond=None)
        return w
    delta, *_ = np.linalg.lstsq(X, y - X @ prior, rcond=None)
    return prior + delta


def set_composition(model: MultiFidelityModel, weights: np.ndarray) -> None:
    with torch.no_grad():
        model.composition.copy_(torch.as_tensor(weights, dtype=DTYPE))


def save_checkpoint(model: MultiFidelityModel, path, extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": asdict(model.model_config),
        "fidelity_config": asdict(model.fidelity_config),
        "tensors": {k: v.detach().tolist() for k, v in model.state_dict().items()},
    }
    if extra:
        payload["extra"] = extra
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_checkpoint(path) -> MultiFidelityModel:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        found = payload.get("format") if isinstance(payload, dict) else None
        raise CheckpointError(f"unsupported checkpoint format {found!r}, expected {CHECKPOINT_FORMAT!r}")
    try:
        model = MultiFidelityModel(
            ModelConfig(**payload["model_config"]), FidelityConfig(**payload["fidelity_config"])
        )
        state = {k: torch.as_tensor(v, dtype=DTYPE) for k, v in payload["tensors"].items()}
        model.load_state_dict(state, strict=True)
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    return model
