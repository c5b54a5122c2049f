# %% [markdown]
# # FLOPs: closed form against a matmul counter
#
# Every matmul adds 2*M*K*N to a scoped counter. The closed-form counts should
# match that counter exactly, and the composite report gives the per-sample cost
# of a full generation at the ~0.6B configuration.

# %%
from patchar.flops import ArchSpec, flops, measure_flops, reference_report

for spec in (
    ArchSpec("conv1d", n_layers=2, hidden=4, length=6, kernel=3),
    ArchSpec("transformer", n_layers=2, hidden=8, length=5, ffn_dim=12, n_heads=2),
    ArchSpec("causal_transformer", n_layers=2, hidden=8, length=4, ffn_dim=12, prefix_length=3, n_heads=2),
):
    print(f"{spec.kind:18s} formula={flops(spec):8d} counted={measure_flops(spec):8d}")

# %% [markdown]
# ## 0.6B composite
#
# 3 s prompt and 10 s target at 40 Hz, P=4, NFE=10, guidance on. The strict variant
# uses the quadratic per-token attention term instead of the linear one.

# %%
report = reference_report()
print(report.table())
print(f"total {report.total / 1e12:.3f} TFLOPs, strict {reference_report(quadratic_attention=True).total / 1e12:.3f}")

# %% [markdown]
# Doubling NFE only touches the decoder term.

# %%
for nfe in (2, 10, 20):
    r = reference_report(nfe=nfe)
    print(f"nfe={nfe:2d} total {r.total / 1e12:.3f} TFLOPs")
