"""Real-time frame offloading for video pass-through mixed reality.

Modules:

* :mod:`mroffload.wire` - binary packet format
* :mod:`mroffload.alga` - node-side publish/subscribe library
* :mod:`mroffload.polyp` - topic router
* :mod:`mroffload.segsvc` - segmentation server
* :mod:`mroffload.calib` - lens distortion, plane scaling, camera-to-device offset
* :mod:`mroffload.buffers` - pose alignment and mask/colour matching buffers
* :mod:`mroffload.bench` - synthetic scene, pipeline runner and latency reports
"""

__version__ = "0.1.0"
