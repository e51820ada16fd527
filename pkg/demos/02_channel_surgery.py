# # Physically removing channels
#
# Pruning a channel whose scale and shift are both zero changes nothing about
# the network output, because that channel contributes exactly zero after the
# normalisation.  Surgery removes it from the conv, the normalisation and the
# next layer's inputs, and the network gets cheaper.

import numpy as np

from earlybird import apply_mask, build_network, count_flops, network_mask, vgg_mini

rng = np.random.default_rng(1)
net = build_network(vgg_mini(), seed=0)

# Give the scales some spread so that the mask is not decided by ties.

for name in net.gamma_names:
    net.params[name][...] = rng.normal(0, 1, net.params[name].shape)

mask = network_mask(net, p=0.5)
small = apply_mask(net, mask)

print("channels before:", net.spec.conv_channels())
print("channels after: ", small.spec.conv_channels())

before, after = count_flops(net.spec), count_flops(small.spec)
print(f"forward FLOPs {before.forward_flops:,} -> {after.forward_flops:,} "
      f"({after.forward_flops / before.forward_flops:.2f}x)")

# The same mask applied as zeros inside the dense network.

zeroed = net.copy()
for bn, off, size in net.channel_table:
    drop = mask.bits[off : off + size] == 0
    zeroed.params[f"{bn}.gamma"][drop] = 0
    zeroed.params[f"{bn}.beta"][drop] = 0

x = rng.normal(size=(4, 3, 32, 32)).astype(np.float32)
diff = np.abs(small.forward(x, train=False) - zeroed.forward(x, train=False)).max()
print("largest logit difference:", diff)
