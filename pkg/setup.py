#!/usr/bin/env python
"""
Setup script for the multi-scale speaker diarization pipeline
"""
import os
import sys
import subprocess

def run_command(command, description):
    """Run a command and handle errors"""
    print(f"\n{description}...")
    try:
        subprocess.run(command, shell=True, check=True, capture_output=True, text=True)
        print(f"✓ {description} completed successfully")
        return True
    except subprocess.CalledProcessError as e:
        print(f"✗ {description} failed: {e.stderr}")
        return False

def main():
    """Main setup function"""
    print("🚀 Setting up the msdiar diarization pipeline")
    print("=" * 50)

    # Check if we're in the right directory
    if not os.path.exists('backend/manage.py'):
        print("✗ Error: Please run this script from the project root directory")
        sys.exit(1)

    # Change to backend directory
    os.chdir('backend')

    # Install dependencies
    if not run_command('pip install -r requirements.txt', 'Installing dependencies'):
        print("✗ Failed to install dependencies. Please check your Python environment.")
        sys.exit(1)

    # Generate a small sample corpus
    print("\n🎙️  Generating a sample corpus...")
    if run_command('python manage.py synth data/sample --num-sessions 5', 'Synthesizing sessions'):
        print("✓ Sample corpus written to backend/data/sample")
    else:
        print("⚠️  Could not synthesize the sample corpus. You can do it manually later:")
        print("   python manage.py synth data/sample --num-sessions 5")

    print("\n" + "=" * 50)
    print("🎉 Setup completed successfully!")
    print("\n📋 Next steps:")
    print("1. Diarize the sample corpus by clustering:")
    print("   cd backend")
    print("   python manage.py diarize data/sample data/hyp")
    print("\n2. Score the hypotheses (forgiving setup):")
    print("   python manage.py score --ref-dir data/sample --hyp-dir data/hyp --out data/score.jsonl")
    print("\n3. Train the decoder and diarize with it:")
    print("   python manage.py synth data/train --config configs/telephonic.json")
    print("   python manage.py train --train-dir data/train --val-dir data/sample --out data/models/msdd")
    print("   python manage.py diarize data/sample data/hyp-msdd --mode msdd --checkpoint data/models/msdd")
    print("\n📖 For more information, check the README.md file")
    print("=" * 50)

def package():
    """Packaging metadata, used when a build tool (e.g. pip) invokes this file"""
    from setuptools import find_packages, setup
    setup(
        name='msdiar',
        version='0.1.0',
        package_dir={'': 'backend'},
        packages=find_packages('backend', exclude=['*.tests', '*.tests.*']),
        py_modules=['manage'],
        install_requires=[
            'Django>=4.2.0,<5.0.0',
            'numpy>=1.24.0',
            'scipy>=1.10.0',
            'scikit-learn>=1.3.0',
        ],
    )

if __name__ == '__main__':
    if len(sys.argv) > 1:
        package()
    else:
        main()
