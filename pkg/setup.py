import setuptools

with open("README.md", encoding="utf-8") as fh:
    long_description = fh.read()

setuptools.setup(
    name="pym2a",
    version="0.1.0",
    description="MIDI-to-audio features, baseline synthesis and objective evaluation",
    long_description=long_description,
    long_description_content_type="text/markdown",
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: Apache Software License",
        "Operating System :: OS Independent",
        "Topic :: Multimedia :: Sound/Audio :: Analysis",
        "Topic :: Multimedia :: Sound/Audio :: MIDI",
    ],
    packages=setuptools.find_packages(include=["pym2a", "pym2a.*"]),
    python_requires=">=3.8",
    install_requires=[
        "numpy>=1.20",
        "scipy>=1.7",
        "mido>=1.2.10",
        "matplotlib>=3.3",
        "pillow>=8.0",
    ],
    entry_points={
        "console_scripts": [
            "pym2a=pym2a.s11_cli:main",
        ],
    },
)
